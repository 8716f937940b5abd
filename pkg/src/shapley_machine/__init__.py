"""Cooperative-game credit assignment for n-agent ad hoc teamwork.

Subpackages:
  coopgame  - exact characteristic-function games, dividends, Shapley/Banzhaf
  returns   - n-step / truncated lambda-return targets and GAE
  nn        - minimal MLP stack with analytic backward passes and Adam
  envs      - toy common-reward Dec-POMDPs (grid pursuit, diagnostic)
  teammates - scripted uncontrolled-agent pool and team sampling
  trainer   - Shapley Machine / POAM / Banzhaf Machine training pipeline
  cli       - train / eval / verify / plot / replay entry points
"""

__version__ = "0.1.0"
