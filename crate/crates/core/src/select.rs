//! Diverse subset selection by greedy farthest point sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major n×d matrix of image embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    rows: Vec<f64>,
    /// Manifest index of each row.
    row_ids: Vec<usize>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, rows: Vec<f64>, row_ids: Vec<usize>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Empty("embedding matrix needs n ≥ 1 and d ≥ 1".into()));
        }
        if rows.len() != n * d || row_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} values and {} ids for a {n}x{d} matrix",
                rows.len(),
                row_ids.len()
            )));
        }
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding { row: i / d, col: i % d });
        }
        Ok(EmbeddingMatrix { n, d, rows, row_ids })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Self::new(n, d, rows.concat(), (0..n).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn row_ids(&self) -> &[usize] {
        &self.row_ids
    }

    pub fn centroid(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        for i in 0..self.n {
            for (a, b) in c.iter_mut().zip(self.row(i)) {
                *a += b;
            }
        }
        for a in &mut c {
            *a /= self.n as f64;
        }
        c
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the maximum over unselected candidates; ties go to the lowest index.
fn argmax_unselected(values: &[f64], selected: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if selected[i] {
            continue;
        }
        match best {
            Some(b) if values[b] >= v => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least one unselected row")
}

/// Greedy farthest point sampling under Euclidean distance.
///
/// The first pick is the row farthest from the centroid; each later pick
/// maximizes its distance to the nearest already-selected row. Ties go to
/// the lowest row index. Returns row positions in visiting order.
pub fn farthest_point_sample(emb: &EmbeddingMatrix, k: usize) -> Result<Vec<usize>> {
    let n = emb.n();
    if k == 0 || k > n {
        return Err(Error::SubsetSize { k, n });
    }
    let centroid = emb.centroid();
    let mut selected = vec![false; n];
    let from_centroid: Vec<f64> = (0..n).map(|i| sq_dist(emb.row(i), &centroid)).collect();
    let first = argmax_unselected(&from_centroid, &selected);

    let mut order = Vec::with_capacity(k);
    let mut nearest = vec![f64::INFINITY; n];
    let mut pick = first;
    loop {
        selected[pick] = true;
        order.push(pick);
        if order.len() == k {
            break;
        }
        let p = emb.row(pick);
        for (i, d) in nearest.iter_mut().enumerate() {
            let nd = sq_dist(emb.row(i), p);
            if nd < *d {
                *d = nd;
            }
        }
        pick = argmax_unselected(&nearest, &selected);
    }
    Ok(order)
}
