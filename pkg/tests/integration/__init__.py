# Integration tests: CLI end to end and figure-scale acceptance
