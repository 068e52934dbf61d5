"""Multi-modal transformer risk model over ROI token sequences."""
