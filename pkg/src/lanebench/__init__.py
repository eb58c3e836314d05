"""Two-lane lane-change benchmark: kinematic traffic simulator, a hybrid-action
soft actor-critic agent, and a receding-horizon MPC baseline."""

__version__ = "0.1.0"
