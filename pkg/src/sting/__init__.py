"""STING: distributed traffic and interference generation for network stress testing.

A central controller orchestrates agent devices that generate configurable
application-emulation and interference traffic, measure link quality
(throughput, RTT, loss, frame drops) over a shared channel, and persist the
results for analysis.  The data plane runs either over real UDP sockets or
over an in-process emulated shared-capacity channel driven by a virtual
clock, so full test procedures execute reproducibly at desk scale.
"""

__version__ = "0.1.0"
