"""Deterministic simulator of the host / AI-accelerator shared-memory path.

Submodules:
  memory      tagged physical memory maps, sparse byte store, sentinels
  translation six accelerator address-translation designs
  kd          kernel-driver session, mapping lifecycle, and policy knobs
  probe       confused-deputy feasibility probes and capability classification
  validator   on-demand page-validation defense state machine
  iommu       strict per-transaction IOTLB defense model
  engine      pipelined trace execution with exact tick accounting
  cli         command-line surface and report writers
"""

__version__ = "0.1.0"
