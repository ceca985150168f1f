//! Convolution layer geometry.

use crate::error::{Error, Result};

/// One convolution problem. `vlen` is the channel block width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvLayerSpec {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub s: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub vlen: usize,
}

pub const DEFAULT_VLEN: usize = 16;

impl ConvLayerSpec {
    /// "Same" padding for odd filters (`(R-1)/2`, `(S-1)/2`) and `vlen = 16`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(n: usize, c: usize, k: usize, h: usize, w: usize, r: usize, s: usize, stride: usize) -> Self {
        Self { n, c, k, h, w, r, s, stride, pad_h: r.saturating_sub(1) / 2, pad_w: s.saturating_sub(1) / 2, vlen: DEFAULT_VLEN }
    }

    pub fn with_padding(mut self, pad_h: usize, pad_w: usize) -> Self {
        self.pad_h = pad_h;
        self.pad_w = pad_w;
        self
    }

    pub fn with_vlen(mut self, vlen: usize) -> Self {
        self.vlen = vlen;
        self
    }

    pub fn with_minibatch(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.k == 0 {
            return Err(Error::InvalidSpec("N, C and K must be positive"));
        }
        if self.h == 0 || self.w == 0 || self.r == 0 || self.s == 0 {
            return Err(Error::InvalidSpec("spatial extents must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::InvalidSpec("stride must be at least 1"));
        }
        if self.vlen == 0 {
            return Err(Error::InvalidSpec("vlen must be at least 1"));
        }
        if self.r > self.h + 2 * self.pad_h || self.s > self.w + 2 * self.pad_w {
            return Err(Error::InvalidSpec("filter is larger than the padded input"));
        }
        Ok(())
    }

    /// Output rows. Only meaningful for a spec that passed [`validate`](Self::validate).
    pub fn p(&self) -> usize {
        (self.h + 2 * self.pad_h).saturating_sub(self.r) / self.stride.max(1) + 1
    }

    /// Output columns.
    pub fn q(&self) -> usize {
        (self.w + 2 * self.pad_w).saturating_sub(self.s) / self.stride.max(1) + 1
    }

    pub fn c_blocks(&self) -> usize {
        self.c.div_ceil(self.vlen)
    }

    pub fn k_blocks(&self) -> usize {
        self.k.div_ceil(self.vlen)
    }

    /// `2·N·K·C·P·Q·R·S`.
    pub fn flops(&self) -> u64 {
        2 * [self.n, self.k, self.c, self.p(), self.q(), self.r, self.s].iter().map(|&v| v as u64).product::<u64>()
    }
}

/// Output extents `(P, Q)`. Placements that would leave the padded input are
/// dropped, so the division rounds down.
pub fn derive_output_shape(spec: &ConvLayerSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    Ok((spec.p(), spec.q()))
}

/// One row of the ResNet-50 layer table: `(id, C, K, H, W, R, S, stride)`.
pub type LayerRow = (usize, usize, usize, usize, usize, usize, usize, usize);

pub const RESNET50_LAYERS: [LayerRow; 20] = [
    (1, 3, 64, 224, 224, 7, 7, 2),
    (2, 64, 256, 56, 56, 1, 1, 1),
    (3, 64, 64, 56, 56, 1, 1, 1),
    (4, 64, 64, 56, 56, 3, 3, 1),
    (5, 256, 64, 56, 56, 1, 1, 1),
    (6, 256, 512, 56, 56, 1, 1, 2),
    (7, 256, 128, 56, 56, 1, 1, 2),
    (8, 128, 128, 28, 28, 3, 3, 1),
    (9, 128, 512, 28, 28, 1, 1, 1),
    (10, 512, 128, 28, 28, 1, 1, 1),
    (11, 512, 1024, 28, 28, 1, 1, 2),
    (12, 512, 256, 28, 28, 1, 1, 2),
    (13, 256, 256, 14, 14, 3, 3, 1),
    (14, 256, 1024, 14, 14, 1, 1, 1),
    (15, 1024, 256, 14, 14, 1, 1, 1),
    (16, 1024, 2048, 14, 14, 1, 1, 2),
    (17, 1024, 512, 14, 14, 1, 1, 2),
    (18, 512, 512, 7, 7, 3, 3, 1),
    (19, 512, 2048, 7, 7, 1, 1, 1),
    (20, 2048, 512, 7, 7, 1, 1, 1),
];

/// Spec for ResNet-50 layer `id` (1-based) with minibatch `n` and default padding.
pub fn resnet50_layer(id: usize, n: usize) -> Option<ConvLayerSpec> {
    RESNET50_LAYERS.iter().find(|row| row.0 == id).map(|&(_, c, k, h, w, r, s, stride)| ConvLayerSpec::new(n, c, k, h, w, r, s, stride))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(h: usize, r: usize, stride: usize, pad: usize) -> usize {
        let spec = ConvLayerSpec::new(1, 1, 1, h, h, r, r, stride).with_padding(pad, pad);
        derive_output_shape(&spec).unwrap().0
    }

    // Counts filter placements `stride * oj` whose window fits in the padded input.
    fn enumerate_placements(extent: usize, filter: usize, stride: usize, pad: usize) -> usize {
        let padded = extent + 2 * pad;
        (0..padded).filter(|&start| start % stride == 0 && start + filter <= padded).count()
    }

    #[test]
    fn output_shape_examples() {
        assert_eq!(rows(56, 1, 2, 0), 28);
        assert_eq!(rows(56, 3, 1, 1), 56);
        assert_eq!(rows(7, 7, 1, 0), 1);
    }

    #[test]
    fn output_shape_matches_enumeration_for_table() {
        for id in 1..=20 {
            let spec = resnet50_layer(id, 1).unwrap();
            let (p, q) = derive_output_shape(&spec).unwrap();
            assert_eq!(p, enumerate_placements(spec.h, spec.r, spec.stride, spec.pad_h), "layer {id}");
            assert_eq!(q, enumerate_placements(spec.w, spec.s, spec.stride, spec.pad_w), "layer {id}");
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        let spec = ConvLayerSpec::new(1, 1, 1, 2, 2, 5, 5, 1).with_padding(0, 0);
        assert!(matches!(derive_output_shape(&spec), Err(Error::InvalidSpec(_))));
        let spec = ConvLayerSpec::new(1, 1, 1, 8, 8, 3, 3, 0);
        assert!(derive_output_shape(&spec).is_err());
        let spec = ConvLayerSpec::new(0, 1, 1, 8, 8, 3, 3, 1);
        assert!(derive_output_shape(&spec).is_err());
    }

    #[test]
    fn default_padding_keeps_same_geometry() {
        let layer4 = resnet50_layer(4, 28).unwrap();
        assert_eq!((layer4.pad_h, layer4.pad_w), (1, 1));
        assert_eq!((layer4.p(), layer4.q()), (56, 56));
        let layer1 = resnet50_layer(1, 1).unwrap();
        assert_eq!((layer1.p(), layer1.q()), (112, 112));
    }

    #[test]
    fn flop_count_layer4() {
        assert_eq!(resnet50_layer(4, 28).unwrap().flops(), 6_473_908_224);
    }
}
