//! Register blocking of the output plane.

use alloc::vec::Vec;

use crate::layer::ConvLayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockingConfig {
    /// Independent accumulators needed to hide FMA latency.
    pub min_accumulators: usize,
    /// Upper bound set by register pressure.
    pub max_accumulators: usize,
}

impl Default for BlockingConfig {
    fn default() -> Self {
        Self { min_accumulators: 8, max_accumulators: 28 }
    }
}

/// Tiling of a `P×Q` output plane into `rb_p×rb_q` tiles. Tiles on the
/// bottom and right borders may be smaller; each distinct tile shape is a
/// kernel variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegisterBlocking {
    pub rb_p: usize,
    pub rb_q: usize,
    pub p: usize,
    pub q: usize,
}

impl RegisterBlocking {
    pub fn new(p: usize, q: usize, rb_p: usize, rb_q: usize) -> Self {
        Self { rb_p: rb_p.clamp(1, p.max(1)), rb_q: rb_q.clamp(1, q.max(1)), p, q }
    }

    pub fn tiles_p(&self) -> usize {
        self.p.div_ceil(self.rb_p)
    }

    pub fn tiles_q(&self) -> usize {
        self.q.div_ceil(self.rb_q)
    }

    pub fn tile_shape(&self, ojb: usize, oib: usize) -> (usize, usize) {
        (self.rb_p.min(self.p - ojb * self.rb_p), self.rb_q.min(self.q - oib * self.rb_q))
    }

    /// Shape of the border tiles, when `rb_p`/`rb_q` do not divide `P`/`Q`.
    pub fn remainder(&self) -> Option<(usize, usize)> {
        let (rp, rq) = (self.p % self.rb_p, self.q % self.rb_q);
        if rp == 0 && rq == 0 {
            None
        } else {
            Some((if rp == 0 { self.rb_p } else { rp }, if rq == 0 { self.rb_q } else { rq }))
        }
    }

    /// Distinct tile shapes; index 0 is the primary blocking.
    pub fn variants(&self) -> Vec<(usize, usize)> {
        let rows = [self.rb_p, self.p - (self.tiles_p() - 1) * self.rb_p];
        let cols = [self.rb_q, self.q - (self.tiles_q() - 1) * self.rb_q];
        let mut out = Vec::with_capacity(4);
        for r in rows {
            for c in cols {
                if !out.contains(&(r, c)) {
                    out.push((r, c));
                }
            }
        }
        out
    }

    pub fn variant_of(&self, ojb: usize, oib: usize) -> usize {
        let shape = self.tile_shape(ojb, oib);
        self.variants().iter().position(|&v| v == shape).expect("tile shape is always a variant")
    }

    /// `(oj, oi, rows, cols)` of every tile, row-major.
    pub fn tiles(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.tiles_p()).flat_map(move |ojb| {
            (0..self.tiles_q()).map(move |oib| {
                let (h, w) = self.tile_shape(ojb, oib);
                (ojb * self.rb_p, oib * self.rb_q, h, w)
            })
        })
    }
}

/// Widest row blocking `rb_q ≤ min(Q, max)`, then the fewest rows `rb_p`
/// that reach `min_accumulators` (pixel blocking for short rows).
pub fn select_register_blocking(spec: &ConvLayerSpec, config: &BlockingConfig) -> RegisterBlocking {
    let (p, q) = (spec.p(), spec.q());
    let max = config.max_accumulators.max(1);
    let rb_q = q.min(max).max(1);
    let wanted = config.min_accumulators.div_ceil(rb_q).max(1);
    let rb_p = wanted.min(max / rb_q).min(p).max(1);
    RegisterBlocking::new(p, q, rb_p, rb_q)
}
