"""Non-line-of-sight reconstruction by ellipsoidal back projection and
ellipsoid mode decomposition."""

__version__ = "0.1.0"
