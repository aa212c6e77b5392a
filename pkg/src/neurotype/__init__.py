"""Electrophysiological cell-type classifiers: a domain-adversarial network for
excitatory/inhibitory typing across mouse and human cells, and a locally
sparse gated network for Cre-line subclass typing, on a small numpy autodiff
core."""

__version__ = "0.1.0"
