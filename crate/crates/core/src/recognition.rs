//! Text recognition head: height collapse, attention, per-column classifier and CTC.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TextBox;
use crate::nn::{Conv, Init, Linear};
use crate::roi::{pool_column, RecognitionPoolConfig, RoIFeature};
use crate::tensor::{Backward, Conv2dSpec, Graph, ParamId, ParamStore, Tensor, Var};

/// Class index reserved for the CTC blank; token `i` of the alphabet is class `i + 1`.
pub const BLANK: usize = 0;

/// Loss reported for targets that cannot be aligned to the available columns.
pub const CTC_INFEASIBLE_LOSS: f64 = 1.0e6;

const DEFAULT_PUNCTUATION: &str = ".,:;!?-+=/()";

/// Ordered set of distinct single-character tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alphabet {
    tokens: Vec<char>,
}

impl Default for Alphabet {
    /// Lowercase letters, digits and twelve punctuation marks (48 tokens).
    fn default() -> Self {
        let tokens = ('a'..='z')
            .chain('0'..='9')
            .chain(DEFAULT_PUNCTUATION.chars())
            .collect();
        Alphabet { tokens }
    }
}

impl Alphabet {
    pub fn new(tokens: Vec<char>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        for (i, c) in tokens.iter().enumerate() {
            if tokens[..i].contains(c) {
                return Err(Error::Config(format!("alphabet token `{c}` is repeated")));
            }
            if c.is_whitespace() {
                return Err(Error::Config("alphabet tokens cannot be whitespace".into()));
            }
        }
        Ok(Alphabet { tokens })
    }

    /// One token per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => tokens.push(c),
                _ => {
                    return Err(Error::Config(format!(
                        "alphabet line {}: expected a single character, got `{line}`",
                        n + 1
                    )))
                }
            }
        }
        Alphabet::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Alphabet::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        self.tokens.iter().map(|c| format!("{c}\n")).collect()
    }

    /// Number of tokens, excluding the blank.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of classes per column, tokens plus blank.
    pub fn num_classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[char] {
        &self.tokens
    }

    pub fn contains(&self, c: char) -> bool {
        self.tokens.contains(&c)
    }

    /// Class indices of `text`.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.tokens
                    .iter()
                    .position(|&t| t == c)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Invalid(format!("character `{c}` is not in the alphabet")))
            })
            .collect()
    }

    /// Text of class indices; blanks and out-of-range indices are skipped.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .filter(|&&k| k != BLANK)
            .filter_map(|&k| self.tokens.get(k - 1))
            .collect()
    }
}

/// How the attention vector is produced and used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Multiplied into the sequence and trained against character-center masks.
    #[default]
    Supervised,
    UnsupervisedMultiply,
    UnsupervisedConcat,
    Off,
}

impl AttentionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "supervised" => Ok(Self::Supervised),
            "unsupervised_multiply" => Ok(Self::UnsupervisedMultiply),
            "unsupervised_concat" => Ok(Self::UnsupervisedConcat),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "attention must be supervised, unsupervised_multiply, unsupervised_concat or off; got `{other}`"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::UnsupervisedMultiply => "unsupervised_multiply",
            Self::UnsupervisedConcat => "unsupervised_concat",
            Self::Off => "off",
        }
    }

    pub fn apply_mode(&self) -> Option<ApplyMode> {
        match self {
            Self::Supervised | Self::UnsupervisedMultiply => Some(ApplyMode::Multiply),
            Self::UnsupervisedConcat => Some(ApplyMode::Concat),
            Self::Off => None,
        }
    }

    pub fn is_supervised(&self) -> bool {
        *self == Self::Supervised
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    Multiply,
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerKind {
    /// Full-height convolution, three columns wide.
    #[default]
    Conv,
    /// Full-height, one-column projection followed by a left-to-right tanh recurrence.
    Rnn,
}

impl RecognizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "conv" => Ok(Self::Conv),
            "rnn" => Ok(Self::Rnn),
            other => Err(Error::Config(format!("recognizer must be conv or rnn; got `{other}`"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::Rnn => "rnn",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecognitionConfig {
    pub pool: RecognitionPoolConfig,
    pub attention: AttentionMode,
    pub recognizer: RecognizerKind,
}

// ---------------------------------------------------------------------------
// CTC

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest columns that can emit `target`: one per token plus a blank between repeats.
pub fn ctc_min_columns(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Value and logit gradient of the CTC loss.
#[derive(Clone, Debug)]
pub struct CtcResult {
    pub loss: f64,
    pub feasible: bool,
    /// `W x K` gradient of the loss with respect to the logits.
    pub grad: Tensor,
}

/// CTC negative log-likelihood of `target` (class indices, no blanks) under per-column
/// softmax of `logits` (`W x K`), by the forward-backward recursion in log space.
pub fn ctc_forward_backward(logits: &Tensor, target: &[usize]) -> Result<CtcResult> {
    let &[w, k] = logits.shape() else {
        return Err(Error::Shape(format!("ctc logits must be W x K, got {:?}", logits.shape())));
    };
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= k) {
        return Err(Error::Invalid(format!("ctc target class {bad} is the blank or out of range 1..{k}")));
    }
    if ctc_min_columns(target) > w {
        return Ok(CtcResult {
            loss: CTC_INFEASIBLE_LOSS,
            feasible: false,
            grad: Tensor::zeros(&[w, k]),
        });
    }
    let mut logp = logits.data().to_vec();
    for row in logp.chunks_mut(k) {
        crate::tensor::log_softmax_in_place(row);
    }
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&c| [c, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let lp = |t: usize, s: usize| logp[t * k + ext[s]];
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; w * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..w {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_sum_exp(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_sum_exp(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, s) };
        }
    }
    // beta[t][s]: log-probability of emitting the rest after being in state s at column t.
    let mut beta = vec![ninf; w * s_len];
    beta[(w - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(w - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..w - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_sum_exp(acc, next(s + 1));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_sum_exp(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }
    let last = (w - 1) * s_len;
    let log_p = if s_len > 1 {
        log_sum_exp(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    let mut grad = vec![0.0; w * k];
    let mut occupancy = vec![ninf; k];
    for t in 0..w {
        occupancy.iter_mut().for_each(|v| *v = ninf);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_sum_exp(occupancy[ext[s]], v);
        }
        for c in 0..k {
            let p = logp[t * k + c].exp();
            let post = (occupancy[c] - log_p).exp();
            grad[t * k + c] = p - post;
        }
    }
    Ok(CtcResult {
        loss: -log_p,
        feasible: true,
        grad: Tensor::new(vec![w, k], grad)?,
    })
}

/// CTC loss on the graph; `feasible` is false when the target cannot fit.
pub struct CtcLoss {
    pub loss: Var,
    pub feasible: bool,
}

pub fn ctc_loss(g: &mut Graph, logits: Var, target: &[usize]) -> Result<CtcLoss> {
    let r = ctc_forward_backward(g.value(logits), target)?;
    Ok(CtcLoss {
        loss: g.fused_scalar(r.loss, vec![(logits, r.grad)]),
        feasible: r.feasible,
    })
}

/// Per-column argmax (lowest class on ties), repeats collapsed, blanks dropped.
pub fn ctc_greedy_decode(logits: &Tensor) -> Vec<usize> {
    let k = logits.last_dim().max(1);
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.data().chunks(k) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && prev != Some(best) {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

// ---------------------------------------------------------------------------
// Attention supervision

/// Probability clamp used by the attention loss.
pub const ATTENTION_EPS: f64 = 1e-7;

/// Mean binary cross-entropy between attention values `a` (length W) and a 0/1 mask.
pub fn attention_loss(g: &mut Graph, a: Var, mask: &[f64]) -> Result<Var> {
    let av = g.value(a);
    if av.len() != mask.len() || mask.is_empty() {
        return Err(Error::Shape(format!(
            "attention_loss: {} attention values vs {} mask entries",
            av.len(),
            mask.len()
        )));
    }
    let n = mask.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(mask.len());
    for (&p, &m) in av.data().iter().zip(mask) {
        let q = p.clamp(ATTENTION_EPS, 1.0 - ATTENTION_EPS);
        loss -= m * q.ln() + (1.0 - m) * (1.0 - q).ln();
        let d = if q == p { (q - m) / (q * (1.0 - q)) } else { 0.0 };
        grad.push(d / n);
    }
    let grad = Tensor::new(av.shape().to_vec(), grad)?;
    Ok(g.fused_scalar(loss / n, vec![(a, grad)]))
}

/// Ones at the pooled columns of the character centers (image points) of a text
/// line; centers outside the box horizontally are dropped. Length `out_width`.
pub fn build_char_center_mask(b: &TextBox, centers: &[(f64, f64)], valid_width: usize, out_width: usize) -> Vec<f64> {
    let mut mask = vec![0.0; out_width];
    for &p in centers {
        if let Ok(col) = pool_column(b, p, valid_width) {
            if col < out_width {
                mask[col] = 1.0;
            }
        }
    }
    mask
}

/// Attention peaks: interior-or-edge local maxima at or above 0.5 within the valid width.
pub fn attention_peaks(a: &[f64], valid_width: usize) -> Vec<usize> {
    let a = &a[..valid_width.min(a.len())];
    (0..a.len())
        .filter(|&i| {
            a[i] >= 0.5 && (i == 0 || a[i] > a[i - 1]) && (i + 1 == a.len() || a[i] >= a[i + 1])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Recurrence

struct ElmanBackward;

impl Backward for ElmanBackward {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>> {
        let wh = inputs[1];
        let (w, d) = (output.shape()[0], output.shape()[1]);
        let h = output.data();
        let wd = wh.data();
        let go = grad_out.data();
        let mut dx = vec![0.0; w * d];
        let mut dwh = vec![0.0; d * d];
        let mut carry = vec![0.0; d];
        for t in (0..w).rev() {
            let pre = &mut dx[t * d..(t + 1) * d];
            for j in 0..d {
                let ht = h[t * d + j];
                pre[j] = (go[t * d + j] + carry[j]) * (1.0 - ht * ht);
            }
            carry.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                let hp = &h[(t - 1) * d..t * d];
                for i in 0..d {
                    let row = &wd[i * d..(i + 1) * d];
                    let mut acc = 0.0;
                    for j in 0..d {
                        dwh[i * d + j] += hp[i] * pre[j];
                        acc += row[j] * pre[j];
                    }
                    carry[i] = acc;
                }
            }
        }
        vec![
            Some(Tensor::from_parts(vec![w, d], dx)),
            Some(Tensor::from_parts(vec![d, d], dwh)),
        ]
    }
}

/// `h_t = tanh(x_t + h_{t-1} Wh)` over the rows of `x` (`W x D`), with `h_{-1} = 0`.
pub fn elman_rnn(g: &mut Graph, x: Var, wh: Var) -> Result<Var> {
    let xt = g.value(x);
    let wt = g.value(wh);
    let &[w, d] = xt.shape() else {
        return Err(Error::Shape(format!("elman_rnn input must be W x D, got {:?}", xt.shape())));
    };
    if wt.shape() != [d, d] {
        return Err(Error::Shape(format!("elman_rnn recurrent weight must be {d}x{d}, got {:?}", wt.shape())));
    }
    let mut h = vec![0.0; w * d];
    for t in 0..w {
        for j in 0..d {
            let mut acc = xt.data()[t * d + j];
            if t > 0 {
                for i in 0..d {
                    acc += h[(t - 1) * d + i] * wt.data()[i * d + j];
                }
            }
            h[t * d + j] = acc.tanh();
        }
    }
    let out = Tensor::new(vec![w, d], h)?;
    Ok(g.custom(out, &[x, wh], Box::new(ElmanBackward)))
}

// ---------------------------------------------------------------------------
// Head

/// Outputs of the recognition head for one RoI.
pub struct RecognitionOutput {
    /// `W x K` column logits.
    pub logits: Var,
    /// Length-W attention vector when attention is enabled.
    pub attention: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct RecognitionHead {
    collapse: Conv,
    recurrent: Option<ParamId>,
    att_conv: Option<Conv>,
    att_fc: Option<Linear>,
    classifier: Linear,
    config: RecognitionConfig,
    channels: usize,
}

impl RecognitionHead {
    pub fn new(
        store: &mut ParamStore,
        channels: usize,
        num_classes: usize,
        config: &RecognitionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.pool.validate()?;
        let h = config.pool.height;
        let (kw, pad) = match config.recognizer {
            RecognizerKind::Conv => (3, 1),
            RecognizerKind::Rnn => (1, 0),
        };
        let spec = Conv2dSpec { stride: 1, pad_h: 0, pad_w: pad };
        let collapse = Conv::new(store, "rec.collapse", (h, kw), channels, channels, spec, Init::He, rng)?;
        let recurrent = match config.recognizer {
            RecognizerKind::Conv => None,
            RecognizerKind::Rnn => {
                let std = 0.5 / (channels as f64).sqrt();
                let t = Init::Normal(std);
                let tmp = Linear::new(store, "rec.rnn", channels, channels, t, rng)?;
                Some(tmp.weight)
            }
        };
        let (att_conv, att_fc) = if config.attention.apply_mode().is_some() {
            let spec = Conv2dSpec { stride: 1, pad_h: 0, pad_w: 1 };
            (
                Some(Conv::new(store, "rec.att_conv", (1, 3), channels, channels, spec, Init::He, rng)?),
                Some(Linear::new(store, "rec.att_fc", channels, 1, Init::Normal(0.01), rng)?),
            )
        } else {
            (None, None)
        };
        let n_in = match config.attention.apply_mode() {
            Some(ApplyMode::Concat) => channels + 1,
            _ => channels,
        };
        let classifier = Linear::new(store, "rec.classifier", n_in, num_classes, Init::Normal((1.0 / n_in as f64).sqrt()), rng)?;
        Ok(RecognitionHead {
            collapse,
            recurrent,
            att_conv,
            att_fc,
            classifier,
            config: config.clone(),
            channels,
        })
    }

    pub fn config(&self) -> &RecognitionConfig {
        &self.config
    }

    /// `H_o x W_o x C` RoI features to a `W_o x C` sequence.
    pub fn collapse_height(&self, g: &mut Graph, roi: Var) -> Result<Var> {
        let shape = g.shape(roi).to_vec();
        if shape.len() != 3 || shape[0] != self.config.pool.height || shape[2] != self.channels {
            return Err(Error::Shape(format!(
                "recognition head expects {}xWx{} features, got {shape:?}",
                self.config.pool.height, self.channels
            )));
        }
        let w = shape[1];
        match self.recurrent {
            None => {
                let y = self.collapse.forward_relu(g, roi)?;
                g.reshape(y, &[w, self.channels])
            }
            Some(wh) => {
                let y = self.collapse.forward(g, roi)?;
                let x = g.reshape(y, &[w, self.channels])?;
                let wh = g.param(wh);
                elman_rnn(g, x, wh)
            }
        }
    }

    /// Attention vector (length W) of a `W x C` sequence; `None` with attention off.
    pub fn attention_forward(&self, g: &mut Graph, seq: Var) -> Result<Option<Var>> {
        let (Some(conv), Some(fc)) = (&self.att_conv, &self.att_fc) else {
            return Ok(None);
        };
        let w = g.shape(seq)[0];
        let x = g.reshape(seq, &[1, w, self.channels])?;
        let h = conv.forward_relu(g, x)?;
        let h = g.reshape(h, &[w, self.channels])?;
        let logit = fc.forward(g, h)?;
        let a = g.sigmoid(logit);
        Ok(Some(g.reshape(a, &[w])?))
    }

    pub fn forward(&self, g: &mut Graph, roi: &RoIFeature) -> Result<RecognitionOutput> {
        self.forward_features(g, roi.tensor)
    }

    pub fn forward_features(&self, g: &mut Graph, roi: Var) -> Result<RecognitionOutput> {
        let seq = self.collapse_height(g, roi)?;
        let attention = self.attention_forward(g, seq)?;
        let seq = match (attention, self.config.attention.apply_mode()) {
            (Some(a), Some(mode)) => apply_attention(g, seq, a, mode)?,
            _ => seq,
        };
        let logits = self.classifier.forward(g, seq)?;
        Ok(RecognitionOutput { logits, attention })
    }
}

/// Re-weights (`Multiply`) or extends (`Concat`) a `W x C` sequence with attention `a`.
pub fn apply_attention(g: &mut Graph, seq: Var, a: Var, mode: ApplyMode) -> Result<Var> {
    let w = g.shape(seq)[0];
    if g.value(a).len() != w {
        return Err(Error::Shape(format!(
            "attention length {} does not match sequence width {w}",
            g.value(a).len()
        )));
    }
    match mode {
        ApplyMode::Multiply => g.scale_rows(seq, a),
        ApplyMode::Concat => {
            let col = g.reshape(a, &[w, 1])?;
            g.concat_last(&[seq, col])
        }
    }
}
