# Accent adapter model, losses, decoding and data
