//! Per-layer, per-position key/value store for incremental attention.
//!
//! Presence is tracked per (layer, position): one exit point governs the
//! whole batch at a position, so all batch rows share presence. The store
//! counts recomputes (overwriting a present slot) and backfills (filling an
//! absent slot from a projected hidden state) so "no recomputation" is a
//! measured quantity rather than an assumption.

use crate::tensor::{Scalar, Tensor2D};
use crate::{Error, Result};

/// Key and value blocks for one (layer, position): each is (batch, d_model).
#[derive(Debug, Clone)]
pub struct KVBlock<S: Scalar> {
    pub keys: Tensor2D<S>,
    pub values: Tensor2D<S>,
}

/// Projection parameters needed to reconstruct one layer's K/V from a hidden
/// state, matching how the forward pass computes them (pre-norm, then the
/// layer's key/value projections).
pub struct KvProjection<'a, S: Scalar> {
    pub ln_gain: &'a [S],
    pub ln_bias: &'a [S],
    pub ln_eps: S,
    pub wk: &'a Tensor2D<S>,
    pub bk: &'a [S],
    pub wv: &'a Tensor2D<S>,
    pub bv: &'a [S],
}

/// Result of gathering a layer's cache up to a position.
pub struct Gathered<'a, S: Scalar> {
    /// Present blocks in ascending position order.
    pub blocks: Vec<(usize, &'a KVBlock<S>)>,
    /// Positions `<= up_to_position` with no entry at this layer.
    pub absent: Vec<usize>,
}

#[derive(Debug)]
pub struct KVCache<S: Scalar> {
    layers: usize,
    max_positions: usize,
    batch: usize,
    slots: Vec<Option<KVBlock<S>>>, // layer-major: layer * max_positions + position
    recompute_count: u64,
    backfill_count: u64,
}

impl<S: Scalar> KVCache<S> {
    pub fn new(layers: usize, max_positions: usize, batch: usize) -> Self {
        KVCache {
            layers,
            max_positions,
            batch,
            slots: (0..layers * max_positions).map(|_| None).collect(),
            recompute_count: 0,
            backfill_count: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn recompute_count(&self) -> u64 {
        self.recompute_count
    }

    pub fn backfill_count(&self) -> u64 {
        self.backfill_count
    }

    fn check_bounds(&self, layer: usize, position: usize) -> Result<()> {
        if layer >= self.layers || position >= self.max_positions {
            return Err(Error::contract(format!(
                "cache slot (layer {layer}, position {position}) out of range ({} layers, {} positions)",
                self.layers, self.max_positions
            )));
        }
        Ok(())
    }

    fn slot_index(&self, layer: usize, position: usize) -> usize {
        layer * self.max_positions + position
    }

    pub fn is_present(&self, layer: usize, position: usize) -> bool {
        layer < self.layers
            && position < self.max_positions
            && self.slots[self.slot_index(layer, position)].is_some()
    }

    /// Stores K/V blocks at (layer, position). Overwriting a present slot is
    /// permitted (baseline policies need it) but counted as a recompute.
    pub fn append(
        &mut self,
        layer: usize,
        position: usize,
        keys: Tensor2D<S>,
        values: Tensor2D<S>,
    ) -> Result<()> {
        self.check_bounds(layer, position)?;
        if keys.rows() != self.batch || values.rows() != self.batch {
            return Err(Error::contract(format!(
                "cache append batch {} does not match cache batch {}",
                keys.rows(),
                self.batch
            )));
        }
        if keys.shape() != values.shape() {
            return Err(Error::ShapeMismatch {
                op: "kv append",
                left: keys.shape(),
                right: values.shape(),
            });
        }
        let idx = self.slot_index(layer, position);
        if self.slots[idx].is_some() {
            self.recompute_count += 1;
        }
        self.slots[idx] = Some(KVBlock { keys, values });
        Ok(())
    }

    /// Collects the present blocks for `layer` over positions `0..=up_to_position`,
    /// in position order, plus the list of absent positions. Absence is
    /// reported, not thrown: baseline policies decide what to do about it.
    pub fn gather(&self, layer: usize, up_to_position: usize) -> Gathered<'_, S> {
        let mut blocks = Vec::new();
        let mut absent = Vec::new();
        let end = up_to_position.min(self.max_positions.saturating_sub(1));
        for p in 0..=end {
            match (layer < self.layers).then(|| &self.slots[self.slot_index(layer, p)]) {
                Some(Some(block)) => blocks.push((p, block)),
                _ => absent.push(p),
            }
        }
        Gathered { blocks, absent }
    }

    /// Reconstructs the K/V for an absent slot by projecting `hidden` (the
    /// position's last computed hidden state) through the target layer's
    /// projections. Counted as a backfill.
    pub fn backfill(
        &mut self,
        layer: usize,
        position: usize,
        hidden: &Tensor2D<S>,
        proj: &KvProjection<'_, S>,
    ) -> Result<()> {
        self.check_bounds(layer, position)?;
        if self.is_present(layer, position) {
            return Err(Error::contract(format!(
                "backfill target (layer {layer}, position {position}) is already present"
            )));
        }
        let normed = hidden.layer_norm(proj.ln_gain, proj.ln_bias, proj.ln_eps)?;
        let mut keys = normed.matmul(proj.wk)?;
        keys.add_row_broadcast(proj.bk)?;
        let mut values = normed.matmul(proj.wv)?;
        values.add_row_broadcast(proj.bv)?;
        let idx = self.slot_index(layer, position);
        self.slots[idx] = Some(KVBlock { keys, values });
        self.backfill_count += 1;
        Ok(())
    }

    /// Number of populated (layer, position) slots.
    pub fn populated_slots(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Checks that `position_budgets` is non-increasing past the prompt region;
/// the error names the first offending position pair.
pub fn assert_monotone(position_budgets: &[usize], prompt_size: usize) -> Result<()> {
    for i in prompt_size..position_budgets.len().saturating_sub(1) {
        if position_budgets[i + 1] > position_budgets[i] {
            return Err(Error::contract(format!(
                "budgets increase past the prompt at positions ({}, {}): {} -> {}",
                i,
                i + 1,
                position_budgets[i],
                position_budgets[i + 1]
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(batch: usize, d: usize, fill: f32) -> (Tensor2D<f32>, Tensor2D<f32>) {
        (Tensor2D::filled(batch, d, fill), Tensor2D::filled(batch, d, -fill))
    }

    #[test]
    fn append_sets_presence_without_recompute() {
        let mut cache = KVCache::<f32>::new(4, 8, 2);
        let (k, v) = block(2, 3, 1.0);
        cache.append(0, 0, k, v).unwrap();
        assert!(cache.is_present(0, 0));
        assert!(!cache.is_present(0, 1));
        assert_eq!(cache.recompute_count(), 0);
    }

    #[test]
    fn double_append_counts_recompute() {
        let mut cache = KVCache::<f32>::new(4, 8, 2);
        let (k, v) = block(2, 3, 1.0);
        cache.append(1, 2, k.clone(), v.clone()).unwrap();
        cache.append(1, 2, k, v).unwrap();
        assert_eq!(cache.recompute_count(), 1);
    }

    #[test]
    fn append_out_of_range_errors() {
        let mut cache = KVCache::<f32>::new(4, 8, 2);
        let (k, v) = block(2, 3, 1.0);
        assert!(cache.append(4, 0, k.clone(), v.clone()).is_err());
        assert!(cache.append(0, 8, k, v).is_err());
    }

    #[test]
    fn gather_returns_ordered_blocks_and_absences() {
        let mut cache = KVCache::<f32>::new(2, 6, 1);
        for p in [0usize, 1, 3] {
            let (k, v) = block(1, 2, p as f32);
            cache.append(0, p, k, v).unwrap();
        }
        let g = cache.gather(0, 4);
        assert_eq!(g.blocks.iter().map(|(p, _)| *p).collect::<Vec<_>>(), vec![0, 1, 3]);
        assert_eq!(g.absent, vec![2, 4]);

        let g = cache.gather(0, 1);
        assert!(g.absent.is_empty());
        assert_eq!(g.blocks.len(), 2);
    }

    #[test]
    fn gather_reports_position_absent_after_shallow_exit() {
        // Token 0 exited below layer 1: nothing was stored there.
        let mut cache = KVCache::<f32>::new(2, 4, 1);
        let (k, v) = block(1, 2, 1.0);
        cache.append(0, 0, k, v).unwrap();
        let g = cache.gather(1, 0);
        assert_eq!(g.absent, vec![0]);
    }

    #[test]
    fn assert_monotone_examples() {
        assert!(assert_monotone(&[12, 12, 8, 8, 5], 2).is_ok());
        let err = assert_monotone(&[12, 12, 5, 8], 2).unwrap_err();
        assert!(err.to_string().contains("(2, 3)"), "{err}");
        // empty generation region is vacuously fine
        assert!(assert_monotone(&[3, 7], 2).is_ok());
        // increases inside the prompt region are allowed
        assert!(assert_monotone(&[5, 12, 12, 8], 1).is_ok());
    }

    #[test]
    fn backfill_fills_absent_slot_and_counts() {
        let d = 3;
        let mut cache = KVCache::<f64>::new(2, 4, 1);
        let hidden = Tensor2D::from_rows(&[&[0.5, -1.0, 2.0]]).unwrap();
        let wk = Tensor2D::identity(d);
        let wv = Tensor2D::identity(d).scale(2.0);
        let gain = vec![1.0; d];
        let bias = vec![0.0; d];
        let proj = KvProjection {
            ln_gain: &gain,
            ln_bias: &bias,
            ln_eps: 1e-5,
            wk: &wk,
            bk: &bias,
            wv: &wv,
            bv: &bias,
        };
        cache.backfill(1, 0, &hidden, &proj).unwrap();
        assert_eq!(cache.backfill_count(), 1);
        assert!(cache.is_present(1, 0));

        // values went through the same pre-norm then the value projection
        let normed = hidden.layer_norm(&gain, &bias, 1e-5).unwrap();
        let g = cache.gather(1, 0);
        assert_eq!(g.blocks[0].1.keys, normed);
        assert_eq!(g.blocks[0].1.values, normed.scale(2.0));

        // a second backfill on the now-present slot is a contract violation
        assert!(cache.backfill(1, 0, &hidden, &proj).is_err());
    }

    #[test]
    fn cache_and_weights_move_between_threads() {
        fn assert_send<T: Send>() {}
        fn assert_sync<T: Sync>() {}
        assert_send::<KVCache<f32>>();
        assert_send::<KVCache<f64>>();
        assert_sync::<crate::model::DecoderWeights<f32>>();
        assert_sync::<crate::schedule::ExitSchedule>();
    }

    #[test]
    fn populated_slot_accounting() {
        let mut cache = KVCache::<f32>::new(3, 4, 2);
        assert_eq!(cache.populated_slots(), 0);
        for l in 0..3 {
            let (k, v) = block(2, 2, l as f32);
            cache.append(l, 0, k, v).unwrap();
        }
        let (k, v) = block(2, 2, 9.0);
        cache.append(0, 1, k, v).unwrap();
        assert_eq!(cache.populated_slots(), 4);
    }
}
