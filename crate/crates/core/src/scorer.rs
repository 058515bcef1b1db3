//! Sequence scoring: attention over a user's step states, a two-layer
//! feed-forward scorer on `(state, ad)` pairs and top-k ranking.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{init_params, ModelConfig};
use crate::numerics::{kernels, Activation, Matrix, ParamStore, Tape, Var, PROB_CLIP};

pub const QUERY: &str = "scorer.query";
pub const W1_USER: &str = "scorer.w1_user";
pub const W1_AD: &str = "scorer.w1_ad";
pub const B1: &str = "scorer.b1";
pub const W2: &str = "scorer.w2";
pub const B2: &str = "scorer.b2";

/// A user's states over their behaviour steps, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: String,
    /// Window index of each step.
    pub windows: Vec<i64>,
    /// One row per step.
    pub states: Matrix,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }
}

/// Adds the step query and scorer MLP to `store`. The first affine layer of
/// the MLP acts on `[state ∥ ad]`; it is stored as two blocks.
pub fn init_scorer(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let width = cfg.output_dim();
    let hidden = cfg.dim;
    store.insert_glorot(QUERY, width, 1, rng);
    store.insert_glorot(W1_USER, width, hidden, rng);
    store.insert_glorot(W1_AD, width, hidden, rng);
    store.insert(B1, Matrix::zeros(1, hidden));
    store.insert_glorot(W2, hidden, 1, rng);
    store.insert(B2, Matrix::zeros(1, 1));
}

/// Freshly initialised layer stack and scorer.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params(cfg, &mut store, &mut rng)?;
    init_scorer(cfg, &mut store, &mut rng);
    Ok(store)
}

/// Softmax over steps of `states · q`.
pub fn step_weights(states: &Matrix, q: &Matrix) -> Result<Vec<f64>> {
    if states.rows() == 0 {
        return Err(Error::Input(
            "unscorable user: empty behaviour sequence".into(),
        ));
    }
    let logits = states.matmul(q)?;
    let mut alpha = vec![0.0; states.rows()];
    kernels::softmax_into(logits.values(), &mut alpha);
    Ok(alpha)
}

/// Flat `(step, ad)` pair layout for a batch of `(user, ad)` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct PairIndex {
    pub step_rows: Arc<[usize]>,
    pub ad_rows: Arc<[usize]>,
    /// Pair range of each sample.
    pub offsets: Arc<[usize]>,
}

impl PairIndex {
    /// `user_offsets[u]..user_offsets[u+1]` are the step rows of user `u`.
    pub fn new(user_offsets: &[usize], samples: &[(usize, usize)]) -> Self {
        let mut step_rows = Vec::new();
        let mut ad_rows = Vec::new();
        let mut offsets = vec![0];
        for &(u, a) in samples {
            for r in user_offsets[u]..user_offsets[u + 1] {
                step_rows.push(r);
                ad_rows.push(a);
            }
            offsets.push(step_rows.len());
        }
        Self {
            step_rows: step_rows.into(),
            ad_rows: ad_rows.into(),
            offsets: offsets.into(),
        }
    }
}

/// Scores on the tape. `states` stacks every user's steps (segments given by
/// `user_offsets`); `ads` holds one embedding per row. Returns one raw score
/// per sample as a column.
pub fn score_on_tape(
    tape: &mut Tape,
    params: &ParamStore,
    states: Var,
    user_offsets: &[usize],
    ads: Var,
    samples: &[(usize, usize)],
) -> Result<Var> {
    for &(u, _) in samples {
        if user_offsets[u] == user_offsets[u + 1] {
            return Err(Error::Input(
                "unscorable user: empty behaviour sequence".into(),
            ));
        }
    }
    let pairs = PairIndex::new(user_offsets, samples);
    let q = tape.param(params, QUERY)?;
    let logits = tape.matmul(states, q)?;
    let alpha = tape.segment_softmax(logits, user_offsets.to_vec().into())?;

    let w_user = tape.param(params, W1_USER)?;
    let w_ad = tape.param(params, W1_AD)?;
    let b1 = tape.param(params, B1)?;
    let per_step = tape.matmul(states, w_user)?;
    let per_ad = tape.matmul(ads, w_ad)?;
    let step_part = tape.gather_rows(per_step, pairs.step_rows.clone())?;
    let ad_part = tape.gather_rows(per_ad, pairs.ad_rows.clone())?;
    let pre = tape.add(step_part, ad_part)?;
    let pre = tape.add_bias(pre, b1)?;
    let hidden = tape.activate(pre, Activation::Relu);
    let w2 = tape.param(params, W2)?;
    let b2 = tape.param(params, B2)?;
    let f = tape.affine(hidden, w2, b2)?;

    let weights = tape.gather_rows(alpha, pairs.step_rows.clone())?;
    let weighted = tape.mul(weights, f)?;
    tape.segment_sum(weighted, pairs.offsets)
}

/// Scores of one user against each row of `ads`.
pub fn score_candidates(params: &ParamStore, seq: &UserSequence, ads: &Matrix) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(Error::Input(format!(
            "unscorable user {}: empty behaviour sequence",
            seq.user
        )));
    }
    if ads.rows() == 0 {
        return Ok(Vec::new());
    }
    if ads.cols() != seq.states.cols() {
        return Err(Error::shape(
            "score",
            format!(
                "state width {} vs ad width {}",
                seq.states.cols(),
                ads.cols()
            ),
        ));
    }
    let mut tape = Tape::new();
    let states = tape.constant(seq.states.clone());
    let ad_var = tape.constant(ads.clone());
    let samples: Vec<(usize, usize)> = (0..ads.rows()).map(|a| (0, a)).collect();
    let s = score_on_tape(&mut tape, params, states, &[0, seq.len()], ad_var, &samples)?;
    Ok(tape.value(s).values().to_vec())
}

/// Score of one user against one ad embedding.
pub fn score(params: &ParamStore, seq: &UserSequence, ad: &[f64]) -> Result<f64> {
    Ok(score_candidates(params, seq, &Matrix::row_vector(ad))?[0])
}

/// Sigmoid of a score, clipped away from 0 and 1.
pub fn predict_prob(s: f64) -> f64 {
    kernels::sigmoid(s).clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub ad: String,
    pub score: f64,
}

/// Orders by descending score, then ascending ad id, and keeps `k`.
pub fn top_k(mut scored: Vec<Ranked>, k: usize) -> Vec<Ranked> {
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.ad.cmp(&b.ad),
        o => o,
    });
    scored.truncate(k);
    scored
}

/// Top-`k` candidates for a user. `ids[i]` names row `i` of `ads`.
pub fn rank(
    params: &ParamStore,
    seq: &UserSequence,
    ids: &[String],
    ads: &Matrix,
    k: usize,
) -> Result<Vec<Ranked>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if ids.len() != ads.rows() {
        return Err(Error::shape(
            "rank",
            format!("{} ids for {} ad rows", ids.len(), ads.rows()),
        ));
    }
    let scores = score_candidates(params, seq, ads)?;
    let scored = ids
        .iter()
        .zip(scores)
        .map(|(id, score)| Ranked {
            ad: id.clone(),
            score,
        })
        .collect();
    Ok(top_k(scored, k))
}
