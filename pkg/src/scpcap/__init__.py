"""Structured concept prediction for image captioning, in numpy.

Modules: ``corpus`` (vocabularies, PMI lexicon), ``autodiff`` (reverse-mode
tape), ``wgcn`` (concept graphs and the weighted GCN), ``captioner`` (model
and decoding), ``harness`` (synthetic data, training, ablations), ``cli``.
"""

__version__ = "0.1.0"
