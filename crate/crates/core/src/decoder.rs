//! Task tokens and the bidirectional task/face decoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    AttentionConfig, FeedForward, InitScheme, LayerNorm, MultiHeadAttention, ParamRegistry,
};
use crate::task::Task;
use crate::tensor::{Real, Tape, Var};

pub const LANDMARK_TOKENS: usize = 68;
pub const HEADPOSE_TOKENS: usize = 9;

/// Learnable task embeddings `[K_total, D_t]` with a fixed per-task layout.
#[derive(Debug, Clone)]
pub struct TaskTokenSet {
    pub table: String,
    layout: Vec<(Task, usize)>,
    pub dim: usize,
}

impl TaskTokenSet {
    pub fn layout_for(c_seg: usize) -> Vec<(Task, usize)> {
        Task::ALL
            .iter()
            .map(|&t| {
                let n = match t {
                    Task::Parsing => c_seg,
                    Task::Landmarks => LANDMARK_TOKENS,
                    Task::HeadPose => HEADPOSE_TOKENS,
                    _ => 1,
                };
                (t, n)
            })
            .collect()
    }

    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        name: &str,
        c_seg: usize,
        dim: usize,
    ) -> Result<Self> {
        if c_seg == 0 || dim == 0 {
            return Err(Error::Config(
                "token set needs c_seg > 0 and dim > 0".into(),
            ));
        }
        let layout = Self::layout_for(c_seg);
        let total = layout.iter().map(|l| l.1).sum();
        reg.declare(name, &[total, dim], InitScheme::XavierUniform)?;
        Ok(Self {
            table: name.to_string(),
            layout,
            dim,
        })
    }

    pub fn layout(&self) -> &[(Task, usize)] {
        &self.layout
    }

    pub fn total(&self) -> usize {
        self.layout.iter().map(|l| l.1).sum()
    }

    /// `(first row, row count)` of a task's tokens.
    pub fn span(&self, task: Task) -> (usize, usize) {
        let mut start = 0;
        for &(t, n) in &self.layout {
            if t == task {
                return (start, n);
            }
            start += n;
        }
        unreachable!("every task is in the layout")
    }

    /// The table broadcast to `[batch, K_total, D_t]`.
    pub fn broadcast<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        batch: usize,
    ) -> Result<Var> {
        let table = reg.bind(tape, &self.table)?;
        let k = self.total();
        let t = tape.reshape(table, &[1, k, self.dim])?;
        tape.broadcast_to(t, &[batch, k, self.dim])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub task_tokens: Var,
    pub face_tokens: Var,
}

impl DecoderState {
    pub fn new<T: Real>(tape: &Tape<T>, task_tokens: Var, face_tokens: Var) -> Result<Self> {
        let st = tape.shape(task_tokens);
        let sf = tape.shape(face_tokens);
        if st.len() != 3 || sf.len() != 3 || st[0] != sf[0] || st[2] != sf[2] {
            return Err(Error::shape("decoder_state", st, sf));
        }
        Ok(Self {
            task_tokens,
            face_tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Task self-attention and FFNs only; face tokens are never consulted.
    NoCrossAttn,
    /// Adds task-to-face cross-attention.
    StandardCrossAttn,
    /// Adds face-to-task cross-attention and the face FFN.
    #[default]
    Bidirectional,
}

impl AblationMode {
    pub const ALL: [AblationMode; 3] = [
        AblationMode::NoCrossAttn,
        AblationMode::StandardCrossAttn,
        AblationMode::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::NoCrossAttn => "no-cross-attn",
            AblationMode::StandardCrossAttn => "standard-cross-attn",
            AblationMode::Bidirectional => "bidirectional",
        }
    }

    pub fn reads_face(self) -> bool {
        self != AblationMode::NoCrossAttn
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub attention: AttentionConfig,
    pub ffn_mult: usize,
}

impl DecoderConfig {
    pub fn new(num_layers: usize, attention: AttentionConfig, ffn_mult: usize) -> Result<Self> {
        let cfg = Self {
            num_layers,
            attention,
            ffn_mult,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        self.attention.validate()
    }
}

/// Pre-norm residual attention: `q + MHA(norm(q), norm(kv))`.
#[derive(Debug, Clone)]
pub struct AttentionSublayer {
    pub(crate) norm_q: LayerNorm,
    pub(crate) norm_kv: Option<LayerNorm>,
    pub(crate) attn: MultiHeadAttention,
}

impl AttentionSublayer {
    /// With `self_attention` the query norm is reused for keys and values.
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cfg: AttentionConfig,
        self_attention: bool,
    ) -> Result<Self> {
        let d = cfg.model_dim;
        let (norm_q, norm_kv) = if self_attention {
            (LayerNorm::new(reg, &format!("{prefix}.norm"), d)?, None)
        } else {
            (
                LayerNorm::new(reg, &format!("{prefix}.norm_q"), d)?,
                Some(LayerNorm::new(reg, &format!("{prefix}.norm_kv"), d)?),
            )
        };
        Ok(Self {
            norm_q,
            norm_kv,
            attn: MultiHeadAttention::new(reg, &format!("{prefix}.attn"), cfg)?,
        })
    }

    pub fn attention(&self) -> &MultiHeadAttention {
        &self.attn
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        q: Var,
        kv: Var,
    ) -> Result<Var> {
        let nq = self.norm_q.forward(tape, reg, q)?;
        let nkv = match &self.norm_kv {
            Some(n) => n.forward(tape, reg, kv)?,
            None => nq,
        };
        let a = self.attn.forward(tape, reg, nq, nkv)?;
        tape.add(q, a)
    }
}

/// Pre-norm residual feed-forward: `x + FFN(norm(x))`.
#[derive(Debug, Clone)]
pub struct FfnSublayer {
    norm: LayerNorm,
    ffn: FeedForward,
}

impl FfnSublayer {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        dim: usize,
        mult: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(reg, &format!("{prefix}.norm"), dim)?,
            ffn: FeedForward::new(reg, &format!("{prefix}.ffn"), dim, mult)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        x: Var,
    ) -> Result<Var> {
        let n = self.norm.forward(tape, reg, x)?;
        let y = self.ffn.forward(tape, reg, n)?;
        tape.add(x, y)
    }
}

/// One decoder layer; sublayers absent from the ablation mode are not built.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub tsa: AttentionSublayer,
    pub task_ffn1: FfnSublayer,
    pub tfca: Option<AttentionSublayer>,
    pub task_ffn2: Option<FfnSublayer>,
    pub ftca: Option<AttentionSublayer>,
    pub face_ffn: Option<FfnSublayer>,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cfg: &DecoderConfig,
        mode: AblationMode,
    ) -> Result<Self> {
        let (a, d, m) = (cfg.attention, cfg.attention.model_dim, cfg.ffn_mult);
        let cross = mode != AblationMode::NoCrossAttn;
        let bidir = mode == AblationMode::Bidirectional;
        Ok(Self {
            tsa: AttentionSublayer::new(reg, &format!("{prefix}.tsa"), a, true)?,
            task_ffn1: FfnSublayer::new(reg, &format!("{prefix}.task_ffn1"), d, m)?,
            tfca: cross
                .then(|| AttentionSublayer::new(reg, &format!("{prefix}.tfca"), a, false))
                .transpose()?,
            task_ffn2: cross
                .then(|| FfnSublayer::new(reg, &format!("{prefix}.task_ffn2"), d, m))
                .transpose()?,
            ftca: bidir
                .then(|| AttentionSublayer::new(reg, &format!("{prefix}.ftca"), a, false))
                .transpose()?,
            face_ffn: bidir
                .then(|| FfnSublayer::new(reg, &format!("{prefix}.face_ffn"), d, m))
                .transpose()?,
        })
    }

    /// Task self-attention; face tokens pass through.
    pub fn task_self_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        s: DecoderState,
    ) -> Result<DecoderState> {
        let t = self.tsa.forward(tape, reg, s.task_tokens, s.task_tokens)?;
        Ok(DecoderState {
            task_tokens: t,
            ..s
        })
    }

    /// Task tokens query the face tokens; face tokens pass through.
    pub fn task_to_face<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        s: DecoderState,
    ) -> Result<DecoderState> {
        let Some(tfca) = &self.tfca else { return Ok(s) };
        let t = tfca.forward(tape, reg, s.task_tokens, s.face_tokens)?;
        Ok(DecoderState {
            task_tokens: t,
            ..s
        })
    }

    /// Face tokens query the task tokens; task tokens pass through.
    pub fn face_to_task<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        s: DecoderState,
    ) -> Result<DecoderState> {
        let Some(ftca) = &self.ftca else { return Ok(s) };
        let f = ftca.forward(tape, reg, s.face_tokens, s.task_tokens)?;
        Ok(DecoderState {
            face_tokens: f,
            ..s
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        s: DecoderState,
    ) -> Result<DecoderState> {
        let mut s = self.task_self_attention(tape, reg, s)?;
        s.task_tokens = self.task_ffn1.forward(tape, reg, s.task_tokens)?;
        s = self.task_to_face(tape, reg, s)?;
        if let Some(ffn) = &self.task_ffn2 {
            s.task_tokens = ffn.forward(tape, reg, s.task_tokens)?;
        }
        s = self.face_to_task(tape, reg, s)?;
        if let Some(ffn) = &self.face_ffn {
            s.face_tokens = ffn.forward(tape, reg, s.face_tokens)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub mode: AblationMode,
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<T: Real>(
        reg: &mut ParamRegistry<T>,
        prefix: &str,
        cfg: DecoderConfig,
        mode: AblationMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.num_layers)
            .map(|i| DecoderLayer::new(reg, &format!("{prefix}.layer{i}"), &cfg, mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, mode, layers })
    }

    /// Runs all layers on face tokens `[B, L, D_t]` and the broadcast token table.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        reg: &ParamRegistry<T>,
        face: Var,
        tokens: &TaskTokenSet,
    ) -> Result<DecoderState> {
        let sf = tape.shape(face).to_vec();
        if sf.len() != 3 || sf[2] != self.cfg.attention.model_dim || tokens.dim != sf[2] {
            return Err(Error::shape(
                "decoder_forward",
                &sf,
                &[tokens.total(), tokens.dim],
            ));
        }
        let task = tokens.broadcast(tape, reg, sf[0])?;
        let mut s = DecoderState::new(tape, task, face)?;
        for layer in &self.layers {
            s = layer.forward(tape, reg, s)?;
        }
        Ok(s)
    }
}
