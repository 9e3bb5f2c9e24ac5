"""Storage package - run directories, manifests and checkpoints"""
