# SAE-Steering testbed: toy LM, TopK SAE, feature identification, steering and routing
