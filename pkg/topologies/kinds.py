from enum import Enum


class TopologyKind(str, Enum):
    PRE_NORM = 'pre_norm'
    POST_NORM = 'post_norm'
    DEEP_NORM = 'deep_norm'
    RESIDUAL = 'residual'
    HYBRID_NORM = 'hybrid_norm'
    HYBRID_RESIDUAL = 'hybrid_residual'
    SIAMESE_CANONICAL = 'siamese_canonical'
    SIAMESE_PRACTICAL = 'siamese_practical'

    @classmethod
    def choices(cls):
        return [(kind.value, kind.label) for kind in cls]

    @property
    def label(self):
        return _LABELS[self]

    @property
    def two_stream(self):
        return self in TWO_STREAM_KINDS

    @property
    def siamese(self):
        return self in (TopologyKind.SIAMESE_CANONICAL, TopologyKind.SIAMESE_PRACTICAL)

    @property
    def hybrid_wiring(self):
        """X-stream keeps its main-path LN after attention sub-layers only."""
        return self in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL, TopologyKind.SIAMESE_PRACTICAL)

    @property
    def uses_depth_scaling(self):
        return self.siamese or self in (TopologyKind.HYBRID_NORM, TopologyKind.HYBRID_RESIDUAL)


_LABELS = {
    TopologyKind.PRE_NORM: 'Pre-Norm',
    TopologyKind.POST_NORM: 'Post-Norm',
    TopologyKind.DEEP_NORM: 'DeepNorm',
    TopologyKind.RESIDUAL: 'ResiDual',
    TopologyKind.HYBRID_NORM: 'HybridNorm',
    TopologyKind.HYBRID_RESIDUAL: 'HybridNorm-ResiDual',
    TopologyKind.SIAMESE_CANONICAL: 'SiameseNorm (canonical)',
    TopologyKind.SIAMESE_PRACTICAL: 'SiameseNorm (practical)',
}

TWO_STREAM_KINDS = frozenset({
    TopologyKind.RESIDUAL,
    TopologyKind.HYBRID_RESIDUAL,
    TopologyKind.SIAMESE_CANONICAL,
    TopologyKind.SIAMESE_PRACTICAL,
})


class Reduction(str, Enum):
    TO_PRE_NORM = 'to_pre_norm'
    TO_POST_NORM = 'to_post_norm'
