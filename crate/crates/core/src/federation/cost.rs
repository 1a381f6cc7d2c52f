//! Communication and computation cost of enhancer groups.

use crate::backbone::BackboneConfig;

/// Trainable parameters per group: `D·(2db + d + b) + d·labels`.
pub fn comm_cost(depth: u64, width: u64, bottleneck: u64, labels: u64) -> u64 {
    depth * (2 * width * bottleneck + width + bottleneck) + width * labels
}

/// Extra FLOPs of one enhancer over a sequence: `2·d·b·seq_len`.
pub fn enhancer_flops(width: u64, bottleneck: u64, seq_len: u64) -> u64 {
    2 * width * bottleneck * seq_len
}

/// Parameter accounting for one experiment shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostTable {
    pub backbone_params: u64,
    /// Enhancers of all `J` groups, heads excluded.
    pub pool_enhancer_params: u64,
    pub head_params: u64,
    /// Parameters communicated for one group covering `labels` classes.
    pub upload_params: u64,
    pub flops_per_enhancer: u64,
}

impl CostTable {
    /// `labels` is both the upload head size and the total head size; with
    /// disjoint domains no group can hold more than all classes.
    pub fn new(backbone: &BackboneConfig, groups: u64, bottleneck: u64, labels: u64) -> Self {
        let (depth, width) = (backbone.depth as u64, backbone.width as u64);
        Self {
            backbone_params: backbone.parameter_count(),
            pool_enhancer_params: groups * comm_cost(depth, width, bottleneck, 0),
            head_params: width * labels,
            upload_params: comm_cost(depth, width, bottleneck, labels),
            flops_per_enhancer: enhancer_flops(width, bottleneck, backbone.max_seq_len as u64),
        }
    }

    pub fn total_params(&self) -> u64 {
        self.backbone_params + self.pool_enhancer_params + self.head_params
    }

    /// Communicated over total model parameters.
    pub fn ratio(&self) -> f64 {
        self.upload_params as f64 / self.total_params() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_examples() {
        assert_eq!(comm_cost(12, 768, 64, 0), 1_189_632);
        assert_eq!(comm_cost(1, 1, 1, 1), 5);
        assert_eq!(comm_cost(2, 8, 2, 4), 116);
        assert_eq!(enhancer_flops(768, 64, 256), 25_165_824);
        assert_eq!(enhancer_flops(0, 64, 256), 0);
        assert_eq!(enhancer_flops(1, 1, 1), 2);
    }
}
