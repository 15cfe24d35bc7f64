//! Key/value cache with a committed prefix and a staged tail.
//!
//! A verification forward appends its rows as *staged*. `commit_path` then
//! compacts the accepted rows onto the committed prefix in path order and
//! drops the rest, so rollback is a truncation.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerKv {
    pub(crate) keys: Vec<f32>,
    pub(crate) values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    width: usize,
    max_seq: usize,
    layers: Vec<LayerKv>,
    committed: usize,
    staged_parents: Vec<Option<usize>>,
}

impl KvCache {
    pub fn new(n_layers: usize, width: usize, max_seq: usize) -> Self {
        Self {
            width,
            max_seq,
            layers: vec![
                LayerKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                };
                n_layers
            ],
            committed: 0,
            staged_parents: Vec::new(),
        }
    }

    pub fn committed_len(&self) -> usize {
        self.committed
    }

    pub fn staged_len(&self) -> usize {
        self.staged_parents.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn max_seq(&self) -> usize {
        self.max_seq
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Committed key rows of `layer`, `[committed_len * width]`.
    pub fn committed_keys(&self, layer: usize) -> &[f32] {
        &self.layers[layer].keys[..self.committed * self.width]
    }

    pub fn committed_values(&self, layer: usize) -> &[f32] {
        &self.layers[layer].values[..self.committed * self.width]
    }

    pub(crate) fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer]
    }

    /// Reserve staged slots for a forward over nodes with the given parents
    /// (indices into the same staged batch, `None` = committed context).
    pub(crate) fn begin_stage(&mut self, parents: &[Option<usize>]) -> Result<()> {
        if !self.staged_parents.is_empty() {
            return Err(Error::Cache(format!(
                "{} staged rows still pending; commit or roll back first",
                self.staged_parents.len()
            )));
        }
        let needed = self.committed + parents.len();
        if needed > self.max_seq {
            return Err(Error::MaxSeqOverflow {
                needed,
                max_seq: self.max_seq,
            });
        }
        self.staged_parents = parents.to_vec();
        Ok(())
    }

    /// Keep the staged rows on `path` (root-to-descendant) and drop the rest.
    pub fn commit_staged(&mut self, path: &[usize]) -> Result<()> {
        let mut prev: Option<usize> = None;
        for &node in path {
            let parent = *self
                .staged_parents
                .get(node)
                .ok_or_else(|| Error::Cache(format!("node {node} is not staged")))?;
            if parent != prev {
                return Err(Error::Cache(format!(
                    "node {node} does not extend the path (parent {parent:?}, expected {prev:?})"
                )));
            }
            prev = Some(node);
        }
        let w = self.width;
        let base = self.committed;
        for layer in &mut self.layers {
            for (slot, &node) in path.iter().enumerate() {
                // node >= slot along any root path, so forward copies never clobber a pending source
                let src = (base + node) * w;
                let dst = (base + slot) * w;
                if src != dst {
                    layer.keys.copy_within(src..src + w, dst);
                    layer.values.copy_within(src..src + w, dst);
                }
            }
            layer.keys.truncate((base + path.len()) * w);
            layer.values.truncate((base + path.len()) * w);
        }
        self.committed += path.len();
        self.staged_parents.clear();
        Ok(())
    }

    /// Discard every staged row.
    pub fn rollback(&mut self) {
        let end = self.committed * self.width;
        for layer in &mut self.layers {
            layer.keys.truncate(end);
            layer.values.truncate(end);
        }
        self.staged_parents.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn staged_cache(parents: &[Option<usize>]) -> KvCache {
        let mut c = KvCache::new(1, 2, 16);
        c.begin_stage(parents).unwrap();
        let l = c.layer_mut(0);
        for i in 0..parents.len() {
            l.keys.extend([i as f32, i as f32]);
            l.values.extend([-(i as f32), -(i as f32)]);
        }
        c
    }

    #[test]
    fn commit_branch_compacts_in_path_order() {
        // 0 -> {1, 2}, 2 -> 3
        let mut c = staged_cache(&[None, Some(0), Some(0), Some(2)]);
        c.commit_staged(&[0, 2, 3]).unwrap();
        assert_eq!(c.committed_len(), 3);
        assert_eq!(c.staged_len(), 0);
        assert_eq!(c.committed_keys(0), &[0.0, 0.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn empty_commit_restores_previous_state() {
        let mut c = staged_cache(&[None, Some(0)]);
        c.commit_staged(&[]).unwrap();
        assert_eq!(c, KvCache::new(1, 2, 16));
    }

    #[test]
    fn non_path_is_rejected() {
        let mut c = staged_cache(&[None, Some(0), Some(0)]);
        assert!(c.clone().commit_staged(&[1]).is_err());
        assert!(c.clone().commit_staged(&[0, 1, 2]).is_err());
        assert!(c.commit_staged(&[0, 5]).is_err());
    }

    #[test]
    fn staging_twice_is_rejected() {
        let mut c = staged_cache(&[None]);
        assert!(c.begin_stage(&[None]).is_err());
        c.rollback();
        assert!(c.begin_stage(&[None]).is_ok());
    }

    #[test]
    fn max_seq_enforced() {
        let mut c = KvCache::new(1, 2, 2);
        assert!(matches!(
            c.begin_stage(&[None, Some(0), Some(1)]),
            Err(Error::MaxSeqOverflow { needed: 3, max_seq: 2 })
        ));
    }
}
