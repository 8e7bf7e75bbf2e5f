//! The shared encoder: one parameter set applied independently to code and
//! documents.
//!
//! The built-in encoder is intentionally tiny. Layer one is an additive token
//! plus position lookup, layer two a position-wise `tanh` feed-forward map:
//!
//! ```text
//! first[t] = E[id_t] + P[t]
//! last[t]  = tanh(first[t] · W1 + b1)
//! ```
//!
//! Padded positions are zero in both layers and never receive gradient.
//! Embeddings produced elsewhere can be brought in through
//! [`load_external_embeddings`].

use std::collections::HashMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::TokenIds;
use crate::error::{Error, Result};
use crate::format;
use crate::linalg;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_MAX_LEN: usize = 128;
pub const DEFAULT_VOCAB: usize = 8192;
pub const DEFAULT_INIT_SCALE: f64 = 0.05;

/// Per-token hidden states of a batch at the first and last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    /// n × L × h
    pub first: Array3<f64>,
    /// n × L × h
    pub last: Array3<f64>,
    /// n × L, true at real (unpadded) positions
    pub mask: Array2<bool>,
}

impl LayerStates {
    pub fn zeros(n: usize, len: usize, hidden: usize) -> Self {
        Self {
            first: Array3::zeros((n, len, hidden)),
            last: Array3::zeros((n, len, hidden)),
            mask: Array2::from_elem((n, len), false),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.first.dim().0
    }

    pub fn seq_len(&self) -> usize {
        self.first.dim().1
    }

    pub fn hidden(&self) -> usize {
        self.first.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.first.iter().chain(self.last.iter()).all(|v| v.is_finite())
    }
}

/// Gradient with respect to both layers of a [`LayerStates`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub first: Array3<f64>,
    pub last: Array3<f64>,
}

impl LayerGrads {
    pub fn zeros(n: usize, len: usize, hidden: usize) -> Self {
        Self {
            first: Array3::zeros((n, len, hidden)),
            last: Array3::zeros((n, len, hidden)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoderParams {
    /// V × h
    pub token_embedding: Array2<f64>,
    /// L × h
    pub position: Array2<f64>,
    /// h × h, applied as `x · w1`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

impl TinyEncoderParams {
    /// Uniform initialization in `[-scale, scale]`. Values are drawn in single
    /// precision so that a checkpoint of an untrained model is exact.
    pub fn init(vocab_size: usize, max_len: usize, hidden: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = scale as f32;
        let mut draw = |shape: (usize, usize)| {
            Array2::from_shape_simple_fn(shape, || f64::from(rng.random_range(-scale..=scale)))
        };
        let token_embedding = draw((vocab_size, hidden));
        let position = draw((max_len, hidden));
        let w1 = draw((hidden, hidden));
        let b1 = draw((1, hidden)).remove_axis(Axis(0));
        Self {
            token_embedding,
            position,
            w1,
            b1,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_embedding: Array2::zeros(self.token_embedding.raw_dim()),
            position: Array2::zeros(self.position.raw_dim()),
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.nrows()
    }

    pub fn max_len(&self) -> usize {
        self.position.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.token_embedding.len() + self.position.len() + self.w1.len() + self.b1.len()
    }

    pub fn is_finite(&self) -> bool {
        self.token_embedding
            .iter()
            .chain(self.position.iter())
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .all(|v| v.is_finite())
    }

    /// Flat mutable view over every parameter, in a fixed order.
    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.token_embedding
            .iter_mut()
            .chain(self.position.iter_mut())
            .chain(self.w1.iter_mut())
            .chain(self.b1.iter_mut())
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.token_embedding
            .iter()
            .chain(self.position.iter())
            .chain(self.w1.iter())
            .chain(self.b1.iter())
    }

    fn check_batch(&self, batch: &[TokenIds]) -> Result<usize> {
        let len = batch.first().map_or(0, TokenIds::len);
        if len > self.max_len() {
            return Err(Error::ShapeMismatch(format!(
                "sequence length {len} exceeds the positional table ({})",
                self.max_len()
            )));
        }
        for t in batch {
            if t.len() != len || t.mask.len() != len {
                return Err(Error::ShapeMismatch("ragged token batch".into()));
            }
            if let Some(&id) = t.ids.iter().find(|&&id| id as usize >= self.vocab_size()) {
                return Err(Error::IdOutOfVocabulary {
                    id,
                    vocab_size: self.vocab_size(),
                });
            }
        }
        Ok(len)
    }
}

struct RowForward {
    positions: Vec<usize>,
    first: Array2<f64>,
    last: Array2<f64>,
}

fn forward_row(params: &TinyEncoderParams, ids: &TokenIds) -> RowForward {
    let positions: Vec<usize> = (0..ids.len()).filter(|&t| ids.mask[t]).collect();
    let h = params.hidden();
    let mut first = Array2::zeros((positions.len(), h));
    for (r, &t) in positions.iter().enumerate() {
        let tok = params.token_embedding.row(ids.ids[t] as usize);
        let pos = params.position.row(t);
        for ((o, a), b) in first.row_mut(r).iter_mut().zip(tok.iter()).zip(pos.iter()) {
            *o = a + b;
        }
    }
    let mut last = first.dot(&params.w1);
    last += &params.b1;
    last.mapv_inplace(f64::tanh);
    RowForward {
        positions,
        first,
        last,
    }
}

pub fn tiny_forward(params: &TinyEncoderParams, batch: &[TokenIds]) -> Result<LayerStates> {
    let len = params.check_batch(batch)?;
    let rows: Vec<RowForward> = batch.par_iter().map(|ids| forward_row(params, ids)).collect();

    let mut states = LayerStates::zeros(batch.len(), len, params.hidden());
    for (i, row) in rows.into_iter().enumerate() {
        for (r, &t) in row.positions.iter().enumerate() {
            states.first.slice_mut(s![i, t, ..]).assign(&row.first.row(r));
            states.last.slice_mut(s![i, t, ..]).assign(&row.last.row(r));
            states.mask[[i, t]] = true;
        }
    }
    Ok(states)
}

struct RowBackward {
    d_w1: Array2<f64>,
    d_b1: Array1<f64>,
    /// Gradient on `first` including the path through `last`, at real positions.
    d_first: Array2<f64>,
    positions: Vec<usize>,
}

fn backward_row(
    params: &TinyEncoderParams,
    i: usize,
    states: &LayerStates,
    upstream: &LayerGrads,
) -> RowBackward {
    let positions: Vec<usize> = (0..states.seq_len()).filter(|&t| states.mask[[i, t]]).collect();
    let h = params.hidden();
    let k = positions.len();
    let mut first = Array2::zeros((k, h));
    let mut d_pre = Array2::zeros((k, h));
    let mut d_first = Array2::zeros((k, h));
    for (r, &t) in positions.iter().enumerate() {
        first.row_mut(r).assign(&states.first.slice(s![i, t, ..]));
        d_first.row_mut(r).assign(&upstream.first.slice(s![i, t, ..]));
        let last = states.last.slice(s![i, t, ..]);
        let d_last = upstream.last.slice(s![i, t, ..]);
        for ((o, y), g) in d_pre.row_mut(r).iter_mut().zip(last.iter()).zip(d_last.iter()) {
            *o = g * (1.0 - y * y);
        }
    }
    let d_w1 = first.t().dot(&d_pre);
    let d_b1 = d_pre.sum_axis(Axis(0));
    d_first += &d_pre.dot(&params.w1.t());
    RowBackward {
        d_w1,
        d_b1,
        d_first,
        positions,
    }
}

/// Exact gradient of the forward map given upstream gradients on both layers.
/// Row contributions are accumulated in batch index order.
pub fn tiny_backward(
    params: &TinyEncoderParams,
    batch: &[TokenIds],
    states: &LayerStates,
    upstream: &LayerGrads,
) -> Result<TinyEncoderParams> {
    let (n, len, h) = states.first.dim();
    if batch.len() != n
        || upstream.first.dim() != (n, len, h)
        || upstream.last.dim() != (n, len, h)
        || h != params.hidden()
    {
        return Err(Error::ShapeMismatch(format!(
            "states {:?}, upstream {:?}/{:?}, batch {}, hidden {}",
            states.first.dim(),
            upstream.first.dim(),
            upstream.last.dim(),
            batch.len(),
            params.hidden()
        )));
    }

    let rows: Vec<RowBackward> = (0..n)
        .into_par_iter()
        .map(|i| backward_row(params, i, states, upstream))
        .collect();

    let mut grads = params.zeros_like();
    for (i, row) in rows.into_iter().enumerate() {
        grads.w1 += &row.d_w1;
        grads.b1 += &row.d_b1;
        for (r, &t) in row.positions.iter().enumerate() {
            let g = row.d_first.row(r);
            let id = batch[i].ids[t] as usize;
            grads.token_embedding.row_mut(id).scaled_add(1.0, &g);
            grads.position.row_mut(t).scaled_add(1.0, &g);
        }
    }
    Ok(grads)
}

/// Paired code/document embeddings produced outside this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalEmbeddings {
    /// Unit rows, in the code file's id order.
    pub code: Array2<f64>,
    /// Unit rows, aligned with `code` by id.
    pub doc: Array2<f64>,
    pub ids: Vec<String>,
}

/// Loads two CCSE embedding files and pairs their rows by id. Rows are
/// returned in the code file's id order and normalized to unit length.
pub fn load_external_embeddings(
    code_path: impl AsRef<Path>,
    doc_path: impl AsRef<Path>,
) -> Result<ExternalEmbeddings> {
    let (code_path, doc_path) = (code_path.as_ref(), doc_path.as_ref());
    let (code, code_ids) = format::read_embeddings(code_path)?;
    let (doc, doc_ids) = format::read_embeddings(doc_path)?;
    if code.ncols() != doc.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} has dim {}, {} has dim {}",
            code_path.display(),
            code.ncols(),
            doc_path.display(),
            doc.ncols()
        )));
    }

    let code = linalg::normalize_rows(linalg::to_f64(&code)).map_err(|row| {
        Error::NonFinite(format!("{row} of {} ({})", code_path.display(), code_ids[row]))
    })?;
    let doc = linalg::normalize_rows(linalg::to_f64(&doc)).map_err(|row| {
        Error::NonFinite(format!("{row} of {} ({})", doc_path.display(), doc_ids[row]))
    })?;

    let mut by_id: HashMap<&str, usize> = HashMap::with_capacity(doc_ids.len());
    for (i, id) in doc_ids.iter().enumerate() {
        if by_id.insert(id.as_str(), i).is_some() {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let mut paired_doc = Array2::zeros((code_ids.len(), doc.ncols()));
    for (r, id) in code_ids.iter().enumerate() {
        let j = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::IndexOutOfRange(format!("id {id} has no document embedding")))?;
        paired_doc.row_mut(r).assign(&doc.row(*j));
    }

    Ok(ExternalEmbeddings {
        code,
        doc: paired_doc,
        ids: code_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{encode_tokens, Vocabulary, CLS, PAD};
    use ndarray::array;

    fn small_params(seed: u64) -> TinyEncoderParams {
        TinyEncoderParams::init(12, 6, 4, 0.5, seed)
    }

    fn ids(raw: &[u32], real: usize) -> TokenIds {
        TokenIds {
            ids: raw.to_vec(),
            mask: (0..raw.len()).map(|i| i < real).collect(),
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = TinyEncoderParams::init(50, 8, 6, 0.05, 7);
        assert_eq!(a, TinyEncoderParams::init(50, 8, 6, 0.05, 7));
        assert_ne!(a, TinyEncoderParams::init(50, 8, 6, 0.05, 8));
        assert!(a.values().all(|v| v.abs() <= 0.05 && (*v as f32) as f64 == *v));
        assert_eq!(a.num_params(), 50 * 6 + 8 * 6 + 36 + 6);
    }

    #[test]
    fn zero_feed_forward_gives_zero_last_layer() {
        let mut p = small_params(1);
        p.w1.fill(0.0);
        p.b1.fill(0.0);
        let s = tiny_forward(&p, &[ids(&[CLS, 5, 6, PAD], 3)]).unwrap();
        assert!(s.last.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_is_lookup_sum() {
        let p = small_params(2);
        let s = tiny_forward(&p, &[ids(&[7], 1)]).unwrap();
        let expect = &p.token_embedding.row(7) + &p.position.row(0);
        assert_eq!(s.first.slice(s![0, 0, ..]), expect);
    }

    #[test]
    fn padded_positions_are_zero() {
        let p = small_params(3);
        let s = tiny_forward(&p, &[ids(&[CLS, 4, PAD, PAD], 2)]).unwrap();
        for t in 2..4 {
            assert!(s.first.slice(s![0, t, ..]).iter().all(|&v| v == 0.0));
            assert!(s.last.slice(s![0, t, ..]).iter().all(|&v| v == 0.0));
        }
        assert_eq!(s.mask.row(0).to_vec(), vec![true, true, false, false]);
    }

    #[test]
    fn out_of_vocabulary_id_is_fatal() {
        let p = small_params(4);
        let err = tiny_forward(&p, &[ids(&[CLS, 12], 2)]).unwrap_err();
        assert!(err.to_string().starts_with("id out of vocabulary"));
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let p = small_params(4);
        assert!(tiny_forward(&p, &[ids(&[CLS; 7], 7)]).is_err());
    }

    #[test]
    fn code_and_document_share_the_encoder() {
        let vocab = Vocabulary::from_tokens(["def", "foo", "return"]);
        let p = TinyEncoderParams::init(vocab.len(), 8, 4, 0.3, 5);
        let as_code = encode_tokens(&["def", "foo"], &vocab, 8);
        let as_doc = encode_tokens(&["def", "foo"], &vocab, 8);
        assert_eq!(
            tiny_forward(&p, &[as_code]).unwrap(),
            tiny_forward(&p, &[as_doc]).unwrap()
        );
    }

    #[test]
    fn batch_permutation_equivariance() {
        let p = small_params(6);
        let a = ids(&[CLS, 4, 5, PAD], 3);
        let b = ids(&[CLS, 9, PAD, PAD], 2);
        let ab = tiny_forward(&p, &[a.clone(), b.clone()]).unwrap();
        let ba = tiny_forward(&p, &[b, a]).unwrap();
        assert_eq!(ab.first.index_axis(Axis(0), 0), ba.first.index_axis(Axis(0), 1));
        assert_eq!(ab.last.index_axis(Axis(0), 1), ba.last.index_axis(Axis(0), 0));
    }

    fn weighted_output(p: &TinyEncoderParams, batch: &[TokenIds], w: &LayerGrads) -> f64 {
        let s = tiny_forward(p, batch).unwrap();
        (&s.first * &w.first).sum() + (&s.last * &w.last).sum()
    }

    fn random_upstream(n: usize, len: usize, h: usize, seed: u64) -> LayerGrads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = LayerGrads::zeros(n, len, h);
        g.first.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        g.last.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        g
    }

    #[test]
    fn jacobian_vector_product_matches_finite_difference() {
        // Oracle: forward differences of the forward map along one weight.
        let p = small_params(7);
        let batch = [ids(&[CLS, 4, 5, PAD], 3), ids(&[CLS, 8, 4, 11], 4)];
        let w = random_upstream(2, 4, 4, 9);
        let grads = tiny_backward(&p, &batch, &tiny_forward(&p, &batch).unwrap(), &w).unwrap();
        let eps = 1e-6;
        let base = weighted_output(&p, &batch, &w);
        for (r, c) in [(0, 0), (1, 3), (3, 2)] {
            let mut q = p.clone();
            q.w1[[r, c]] += eps;
            let fd = (weighted_output(&q, &batch, &w) - base) / eps;
            let an = grads.w1[[r, c]];
            assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-4, "w1[{r},{c}] fd {fd} an {an}");
        }
        let mut q = p.clone();
        q.token_embedding[[4, 1]] += eps;
        let fd = (weighted_output(&q, &batch, &w) - base) / eps;
        let an = grads.token_embedding[[4, 1]];
        assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-4);
    }

    #[test]
    fn central_difference_gradient_check_on_every_parameter() {
        let p = TinyEncoderParams::init(7, 4, 3, 0.5, 11);
        let batch = [ids(&[CLS, 4, 5, 0], 3), ids(&[CLS, 6, 4, 4], 4)];
        let w = random_upstream(2, 4, 3, 12);
        let grads = tiny_backward(&p, &batch, &tiny_forward(&p, &batch).unwrap(), &w).unwrap();
        let analytic: Vec<f64> = grads.values().copied().collect();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for k in 0..p.num_params() {
            let mut plus = p.clone();
            *plus.values_mut().nth(k).unwrap() += eps;
            let mut minus = p.clone();
            *minus.values_mut().nth(k).unwrap() -= eps;
            let fd = (weighted_output(&plus, &batch, &w) - weighted_output(&minus, &batch, &w)) / (2.0 * eps);
            let a = analytic[k];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = small_params(8);
        let batch = [ids(&[CLS, 4, 5, PAD], 3)];
        let s = tiny_forward(&p, &batch).unwrap();
        let g = tiny_backward(&p, &batch, &s, &LayerGrads::zeros(1, 4, 4)).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn absent_tokens_and_padding_get_no_gradient() {
        let p = small_params(9);
        let batch = [ids(&[CLS, 4, PAD, PAD], 2)];
        let s = tiny_forward(&p, &batch).unwrap();
        let g = tiny_backward(&p, &batch, &s, &random_upstream(1, 4, 4, 1)).unwrap();
        for id in 0..12 {
            let touched = g.token_embedding.row(id).iter().any(|&v| v != 0.0);
            assert_eq!(touched, id == CLS as usize || id == 4, "row {id}");
        }
        // positions 2.. are padding
        assert!(g.position.slice(s![2.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_shape_mismatch_is_fatal() {
        let p = small_params(10);
        let batch = [ids(&[CLS, 4], 2)];
        let s = tiny_forward(&p, &batch).unwrap();
        assert!(matches!(
            tiny_backward(&p, &batch, &s, &LayerGrads::zeros(2, 2, 4)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn external_embeddings_are_paired_and_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let code = dir.path().join("code.ccse");
        let doc = dir.path().join("doc.ccse");
        format::write_embeddings(&code, &array![[2.0f32, 0.0], [0.0, 1.0]], &["a".into(), "b".into()]).unwrap();
        format::write_embeddings(&doc, &array![[0.0f32, 3.0], [1.0, 1.0]], &["b".into(), "a".into()]).unwrap();
        let e = load_external_embeddings(&code, &doc).unwrap();
        assert_eq!(e.ids, vec!["a", "b"]);
        assert_eq!(e.code.row(0).to_vec(), vec![1.0, 0.0]);
        assert!((linalg::norm(e.doc.row(0)) - 1.0).abs() < 1e-6);
        assert_eq!(e.doc.row(1).to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn external_embedding_errors() {
        let dir = tempfile::tempdir().unwrap();
        let code = dir.path().join("code.ccse");
        let doc = dir.path().join("doc.ccse");
        format::write_embeddings(&code, &array![[1.0f32, 0.0]], &["a".into()]).unwrap();
        format::write_embeddings(&doc, &array![[1.0f32, 0.0, 0.0]], &["a".into()]).unwrap();
        assert!(matches!(
            load_external_embeddings(&code, &doc),
            Err(Error::DimensionMismatch(_))
        ));

        format::write_embeddings(&doc, &array![[f32::NAN, 0.0]], &["a".into()]).unwrap();
        let err = load_external_embeddings(&code, &doc).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(err.to_string().contains("row 0"), "{err}");

        let mut bytes = std::fs::read(&doc).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        std::fs::write(&doc, bytes).unwrap();
        let err = load_external_embeddings(&code, &doc).unwrap_err();
        assert!(err.to_string().starts_with("unrecognized embedding file"));
    }
}
