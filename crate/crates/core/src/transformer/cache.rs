use crate::error::{Error, Result};

/// Append-only key/value store of one sequence, per layer and head.
#[derive(Debug, Clone)]
pub struct KvCache {
    n_heads: usize,
    d_head: usize,
    max_seq: usize,
    layers: Vec<LayerKv>,
}

#[derive(Debug, Clone, Default)]
struct LayerKv {
    // per head, flat [len, d_head]
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize, n_heads: usize, d_head: usize, max_seq: usize) -> Self {
        let layer = LayerKv {
            k: vec![Vec::new(); n_heads],
            v: vec![Vec::new(); n_heads],
            len: 0,
        };
        KvCache {
            n_heads,
            d_head,
            max_seq,
            layers: vec![layer; n_layers],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn len(&self, layer: usize) -> usize {
        self.layers[layer].len
    }

    pub fn is_empty(&self, layer: usize) -> bool {
        self.len(layer) == 0
    }

    pub fn append(&mut self, layer: usize, k: &[Vec<f32>], v: &[Vec<f32>]) -> Result<()> {
        let l = &mut self.layers[layer];
        if l.len == self.max_seq {
            return Err(Error::SequenceLength {
                cached: l.len,
                max_seq: self.max_seq,
            });
        }
        if k.len() != self.n_heads || v.len() != self.n_heads {
            return Err(Error::Dimension {
                context: "kv cache heads",
                expected: self.n_heads,
                actual: k.len().min(v.len()),
            });
        }
        for h in 0..self.n_heads {
            debug_assert_eq!(k[h].len(), self.d_head);
            debug_assert_eq!(v[h].len(), self.d_head);
            l.k[h].extend_from_slice(&k[h]);
            l.v[h].extend_from_slice(&v[h]);
        }
        l.len += 1;
        Ok(())
    }

    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let d = self.d_head;
        &self.layers[layer].k[head][pos * d..(pos + 1) * d]
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let d = self.d_head;
        &self.layers[layer].v[head][pos * d..(pos + 1) * d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_overflow() {
        let mut c = KvCache::new(2, 2, 3, 2);
        let k = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let v = vec![vec![0.5; 3], vec![-0.5; 3]];
        c.append(1, &k, &v).unwrap();
        assert_eq!((c.len(0), c.len(1)), (0, 1));
        assert_eq!(c.key(1, 1, 0), &[4.0, 5.0, 6.0]);
        assert_eq!(c.value(1, 0, 0), &[0.5; 3]);
        c.append(1, &k, &v).unwrap();
        assert!(matches!(c.append(1, &k, &v), Err(Error::SequenceLength { cached: 2, max_seq: 2 })));
        assert!(c.append(0, &k[..1], &v).is_err());
    }
}
