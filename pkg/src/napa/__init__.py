"""Style-transfer-driven 3D human pose toolkit.

Modules:
    skeleton: kinematic chain, bone algebra, metrics, angle limits.
    bonemap: hard and differentiable soft bone-map rendering.
    losses: feature extractor and the training loss suite.
    nets: stylizer, 2D pose net, depth net, checkpoint bundles.
    data: manifests, preprocessing, synthetic dataset generator.
    training: staged training protocol and batch mixing.
    cli: command line entry points.
    service: annotation HTTP backend.
"""
__version__ = "0.1.0"
