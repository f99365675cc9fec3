"""Blockchain-assisted federated learning for VANET incident dissemination.

Modules:
    sim         event engine, mobility, radio and Hello-protocol data collection
    ledger      microblock / keyblock / message-chain ledger with merge and verify
    model       small MLP, local training and FedAvg
    federation  the FL loop with its security check and keyblock sealing
    guard       adversaries, poisoning and Isolation-Forest screening
    pofl        timer-based relay election (PoFL and a PoS baseline)
    capacity    expected uploads per time slot with and without blockchain
    econ        Stackelberg incentive game
    experiment  seeded experiment specs and CSV reports
"""

__version__ = "0.1.0"
