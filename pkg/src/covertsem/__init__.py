"""Covert semantic communication over simulated wireless channels.

A shared gated residual encoder serves two transmission paths: a public-only
"explicit" path and a joint "stego" path that embeds a covert task inside
statistically indistinguishable features. Selection of residual blocks is
learned per path with Gumbel-Softmax gates, and a contrastive alignment term
pushes the two paths' features toward a common distribution so that a trained
detector cannot tell them apart.
"""

__version__ = "0.1.0"
