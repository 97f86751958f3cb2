"""Conservative reachability for nonlinear games through state-augmented linear models and the Hopf formula."""

__version__ = "0.1.0"
