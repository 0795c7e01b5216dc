"""DQN generalization across game flavours, built on numpy.

Subpackages and modules:

``nn_core``      convolutional Q-network, backprop, RMSProp, gradient check
``env_suite``    flavoured mini-games, sticky actions, tabular oracle
``dqn_agent``    replay, epsilon-greedy, target network, training loop
``transfer``     checkpoint files and layer transfer for fine-tuning
``protocol``     evaluation, aggregation, smoothing, sweeps, frame budgets
``harness``      configs, run directories, reports and the ``flavorbench`` CLI
"""

__version__ = "0.1.0"
