//! Diagnostics over trained models: codebook diversity, superpixel
//! similarity maps, code-index images, projection weight tables and
//! reconstruction error.

use std::path::Path;

use crate::codebook::{CodebookSet, GroupLayout};
use crate::data::{pgm_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::linalg::{cosine_sim, pca_eigvals, Matrix};
use crate::tensor::{Scalar, Tensor};
use crate::vae::{evaluate, Checkpoint};

/// Every group's codes zero-padded into that group's channel slice of the
/// full `g·d` space, one code per row.
pub fn padded_codes<T: Scalar>(cb: &CodebookSet<T>) -> Matrix {
    let layout = cb.layout();
    let (g, d) = (layout.groups(), layout.code_dim());
    let rows: usize = layout.radices().iter().sum();
    let mut m = Matrix::zeros(rows, g * d);
    let mut r = 0;
    for (k, codes) in cb.groups().iter().enumerate() {
        for code in codes.data().chunks(d) {
            for (j, v) in code.iter().enumerate() {
                m.set(r, k * d + j, v.as_f64());
            }
            r += 1;
        }
    }
    m
}

/// Mean PCA eigenvalue of the padded code matrix, i.e. the average
/// per-channel variance of the code population.
pub fn codebook_diversity<T: Scalar>(cb: &CodebookSet<T>) -> Result<f64> {
    let m = padded_codes(cb);
    if m.rows() < 2 {
        return Ok(0.0);
    }
    let eig = pca_eigvals(&m)?;
    Ok(eig.iter().sum::<f64>() / eig.len() as f64)
}

/// Cosine similarity of every position of an `[H×W×C]` map to the
/// position at `(⌊H/2⌋, ⌊W/2⌋)`, as an `[H×W]` tensor.
pub fn similarity_map<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<f64>> {
    let &[h, w, c] = features.shape() else {
        return Err(Error::shape("similarity_map", features.shape(), &[0, 0, 0]));
    };
    if h == 0 || w == 0 {
        return Err(Error::Input("similarity map needs a non-empty grid".into()));
    }
    let v = features.to_f64_vec();
    let center = &v[((h / 2) * w + w / 2) * c..][..c];
    let sims = v.chunks(c.max(1)).map(|u| cosine_sim(u, center)).collect();
    Tensor::new([h, w], sims)
}

/// Grey levels for a map in `[-1, 1]`.
pub fn similarity_pgm(map: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let px: Vec<u8> = map
        .data()
        .iter()
        .map(|s| ((s + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
        .collect();
    pgm_bytes(w, h, &px)
}

/// Per-group grey PGMs plus one colour PPM for a single `h×w` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMaps {
    pub groups: Vec<Vec<u8>>,
    pub combined: Vec<u8>,
}

/// Fixed colour for a scalar index (SplitMix64 finaliser bytes).
pub fn index_color(s: u64) -> [u8; 3] {
    let mut z = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    [z as u8, (z >> 8) as u8, (z >> 16) as u8]
}

/// Renders the code choices of one `h×w` grid. `tuple_idx` is
/// position-major `[h·w × g]`; group `k` maps index `i` to grey
/// `255·i/(a_k − 1)`.
pub fn index_maps(
    layout: &GroupLayout,
    tuple_idx: &[usize],
    scalar_idx: &[u64],
    h: usize,
    w: usize,
) -> Result<IndexMaps> {
    let g = layout.groups();
    let n = h * w;
    if tuple_idx.len() != n * g || scalar_idx.len() != n {
        return Err(Error::shape("index_maps", &[tuple_idx.len(), scalar_idx.len()], &[n * g, n]));
    }
    let mut groups = Vec::with_capacity(g);
    for (k, &a) in layout.radices().iter().enumerate() {
        let px = (0..n)
            .map(|p| {
                let i = tuple_idx[p * g + k];
                if i >= a {
                    return Err(Error::Input(format!("index {i} out of range for group {k} of size {a}")));
                }
                Ok(if a > 1 {
                    (255.0 * i as f64 / (a - 1) as f64).round() as u8
                } else {
                    0
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        groups.push(pgm_bytes(w, h, &px)?);
    }
    let total = layout.total_codes();
    let mut combined = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &s in scalar_idx {
        if s >= total {
            return Err(Error::Input(format!("scalar index {s} >= {total} codes")));
        }
        combined.extend_from_slice(&index_color(s));
    }
    Ok(IndexMaps { groups, combined })
}

/// The organizing matrix `W [rc × c]` softmax-normalized along each axis.
/// `over_outputs` rows sum to one; `over_inputs` columns sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SankeyTables {
    pub over_outputs: Matrix,
    pub over_inputs: Matrix,
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

pub fn sankey_tables(w: &Matrix) -> SankeyTables {
    let (rows, cols) = (w.rows(), w.cols());
    let mut over_outputs = w.clone();
    for r in 0..rows {
        let mut row = w.row(r).to_vec();
        softmax_in_place(&mut row);
        for (c, v) in row.into_iter().enumerate() {
            over_outputs.set(r, c, v);
        }
    }
    let mut over_inputs = w.clone();
    for c in 0..cols {
        let mut col: Vec<f64> = (0..rows).map(|r| w.get(r, c)).collect();
        softmax_in_place(&mut col);
        for (r, v) in col.into_iter().enumerate() {
            over_inputs.set(r, c, v);
        }
    }
    SankeyTables { over_outputs, over_inputs }
}

/// CSV with one row per expanded channel, labelled with its group under
/// `layout`, and one column per latent channel.
pub fn sankey_csv(table: &Matrix, layout: &GroupLayout) -> Result<String> {
    let d = layout.code_dim();
    if table.rows() != layout.channels() {
        return Err(Error::shape("sankey_csv", &[table.rows()], &[layout.channels()]));
    }
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["channel".to_string(), "group".to_string()];
    header.extend((0..table.cols()).map(|c| format!("out{c}")));
    wtr.write_record(&header).map_err(csv_err)?;
    for r in 0..table.rows() {
        let mut rec = vec![r.to_string(), (r / d).to_string()];
        rec.extend(table.row(r).iter().map(|v| v.to_string()));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Writes `sankey_over_outputs.csv` and `sankey_over_inputs.csv`.
pub fn sankey_export(w: &Matrix, layout: &GroupLayout, dir: &Path) -> Result<SankeyTables> {
    let t = sankey_tables(w);
    write_bytes(&dir.join("sankey_over_outputs.csv"), sankey_csv(&t.over_outputs, layout)?.as_bytes())?;
    write_bytes(&dir.join("sankey_over_inputs.csv"), sankey_csv(&t.over_inputs, layout)?.as_bytes())?;
    Ok(t)
}

/// Eval-mode per-element reconstruction error of `images`.
pub fn eval_mse(ckpt: &Checkpoint, images: &Tensor<f32>) -> Result<f64> {
    Ok(evaluate(&ckpt.model, images, &ckpt.config)?.recon)
}
