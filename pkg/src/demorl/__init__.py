"""Model-predictive acceleration and guidance of reinforcement learning.

DMD-MPC planning over Gaussian control sequences, SAC trained on real plus
planned transitions, ARS linear policies guided at deployment by the planner,
and regret diagnostics for the planner's online updates.
"""

__version__ = "0.1.0"
