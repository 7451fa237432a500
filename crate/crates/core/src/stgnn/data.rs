use crate::error::{Error, Result};
use crate::flowdata::{FlowMatrix, Normalizer, Window};
use crate::numcore::Tensor;

/// Dense, gap-free window samples: normalised inputs and raw targets.
#[derive(Clone, Debug)]
pub struct WindowTensors {
    pub n_nodes: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub windows: Vec<Window>,
    /// `[sample][node][t_in]`, normalised.
    inputs: Vec<f64>,
    /// `[sample][node][t_out]`, raw scale.
    targets: Vec<f64>,
}

impl WindowTensors {
    /// Windows with a gap anywhere in `flows` are dropped.
    pub fn build(flows: &FlowMatrix, norm: &Normalizer, windows: &[Window]) -> Result<Self> {
        let n = flows.n_nodes();
        if norm.n_nodes() != n {
            return Err(Error::InvalidData(format!(
                "normaliser covers {} nodes, flows have {n}",
                norm.n_nodes()
            )));
        }
        let (t_in, t_out) = match windows.first() {
            Some(w) => (w.t_in, w.t_out),
            None => (0, 0),
        };
        let mut out = WindowTensors {
            n_nodes: n,
            t_in,
            t_out,
            windows: Vec::new(),
            inputs: Vec::new(),
            targets: Vec::new(),
        };
        'win: for w in windows {
            for r in w.rows() {
                if flows.row(r).iter().any(Option::is_none) {
                    continue 'win;
                }
            }
            for j in 0..n {
                for r in w.input_rows() {
                    out.inputs.push(norm.apply(j, flows.get(r, j).unwrap()));
                }
            }
            for j in 0..n {
                for r in w.target_rows() {
                    out.targets.push(flows.get(r, j).unwrap());
                }
            }
            out.windows.push(*w);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let s = self.n_nodes * self.t_in;
        &self.inputs[i * s..(i + 1) * s]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        let s = self.n_nodes * self.t_out;
        &self.targets[i * s..(i + 1) * s]
    }

    /// `[B, 1, N, T_in]`.
    pub fn input_batch(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.input(i).iter().copied()).collect();
        Tensor::from_parts(vec![idx.len(), 1, self.n_nodes, self.t_in], data)
    }

    /// `[B, N, T_out]`.
    pub fn target_batch(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.target(i).iter().copied()).collect();
        Tensor::from_parts(vec![idx.len(), self.n_nodes, self.t_out], data)
    }
}
