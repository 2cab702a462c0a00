//! Modality-block attention masks.
//!
//! The sequence is laid out as text, image, depth, proprio, action. In the
//! hybrid mask text and image attend only within their own block, depth
//! attends to text, image and itself, proprio attends to text, image and
//! itself, and action attends to everything. The DreamVLA-style ablation
//! additionally lets proprio attend to depth.

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Text,
    Image,
    Depth,
    Proprio,
    Action,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Text,
        Modality::Image,
        Modality::Depth,
        Modality::Proprio,
        Modality::Action,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Depth => "depth",
            Modality::Proprio => "proprio",
            Modality::Action => "action",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskVariant {
    #[default]
    Hybrid,
    DreamVla,
}

impl MaskVariant {
    /// Whether a query of modality `q` may attend a key of modality `k`.
    pub fn allows(self, q: Modality, k: Modality) -> bool {
        use Modality::*;
        match q {
            Text => k == Text,
            Image => k == Image,
            Depth => matches!(k, Text | Image | Depth),
            Proprio => match k {
                Text | Image | Proprio => true,
                Depth => self == MaskVariant::DreamVla,
                Action => false,
            },
            Action => true,
        }
    }
}

/// Token counts per modality, in sequence order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub text: usize,
    pub image: usize,
    pub depth: usize,
    pub proprio: usize,
    pub action: usize,
}

impl TokenLayout {
    pub fn new(
        text: usize,
        image: usize,
        depth: usize,
        proprio: usize,
        action: usize,
    ) -> Result<Self> {
        let layout = Self {
            text,
            image,
            depth,
            proprio,
            action,
        };
        if Modality::ALL.iter().any(|&m| layout.count(m) == 0) {
            return Err(Error::Config(format!(
                "every modality needs at least one token: {layout:?}"
            )));
        }
        Ok(layout)
    }

    /// Layout for a model built without the depth branch.
    pub fn without_depth(text: usize, image: usize, proprio: usize, action: usize) -> Result<Self> {
        let mut layout = Self::new(text, image, 1, proprio, action)?;
        layout.depth = 0;
        Ok(layout)
    }

    /// Parses `"text,image,depth,proprio,action"`.
    pub fn parse(s: &str) -> Result<Self> {
        let counts = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("layout {s:?}: {e}")))?;
        match counts.as_slice() {
            &[t, i, d, p, a] => Self::new(t, i, d, p, a),
            _ => Err(Error::Config(format!("layout {s:?} needs five counts"))),
        }
    }

    pub fn count(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Image => self.image,
            Modality::Depth => self.depth,
            Modality::Proprio => self.proprio,
            Modality::Action => self.action,
        }
    }

    pub fn offset(&self, m: Modality) -> usize {
        Modality::ALL
            .iter()
            .take_while(|&&x| x != m)
            .map(|&x| self.count(x))
            .sum()
    }

    pub fn range(&self, m: Modality) -> std::ops::Range<usize> {
        let o = self.offset(m);
        o..o + self.count(m)
    }

    pub fn total(&self) -> usize {
        Modality::ALL.iter().map(|&m| self.count(m)).sum()
    }

    pub fn modality_of(&self, position: usize) -> Option<Modality> {
        Modality::ALL
            .iter()
            .copied()
            .find(|&m| self.range(m).contains(&position))
    }
}

/// Row-major `L × L` permission matrix; `allow[q][k]` lets query `q` read key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    len: usize,
    allow: Rc<[bool]>,
}

impl AttentionMask {
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let len = rows.len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::shape(
                "attention mask",
                &[len],
                &[rows.first().map_or(0, Vec::len)],
            ));
        }
        Ok(Self {
            len,
            allow: rows.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.len + k]
    }

    pub fn set(&mut self, q: usize, k: usize, value: bool) {
        let mut v = self.allow.to_vec();
        v[q * self.len + k] = value;
        self.allow = v.into();
    }

    pub fn count_true(&self) -> usize {
        self.allow.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }

    /// Shared row-major buffer, as consumed by the attention kernel.
    pub fn shared(&self) -> Rc<[bool]> {
        self.allow.clone()
    }

    /// Rows `rows` restricted to key columns `cols`, row-major.
    pub fn submatrix(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Rc<[bool]> {
        rows.flat_map(|q| cols.clone().map(move |k| (q, k)))
            .map(|(q, k)| self.get(q, k))
            .collect()
    }

    /// One line of `0`/`1` characters per query row.
    pub fn to_bit_rows(&self) -> String {
        let mut s = String::with_capacity(self.len * (self.len + 1));
        for q in 0..self.len {
            for k in 0..self.len {
                s.push(if self.get(q, k) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    /// Modality-level view: one row per query block naming the key blocks it reads.
    pub fn block_summary(&self, layout: &TokenLayout) -> String {
        let mut s = String::new();
        for q in Modality::ALL.into_iter().filter(|&m| layout.count(m) > 0) {
            let first = layout.offset(q);
            let keys: Vec<&str> = Modality::ALL
                .into_iter()
                .filter(|&k| layout.count(k) > 0 && self.get(first, layout.offset(k)))
                .map(Modality::name)
                .collect();
            let _ = writeln!(s, "{:>8} -> {}", q.name(), keys.join(", "));
        }
        s
    }
}

fn build(layout: &TokenLayout, variant: MaskVariant) -> AttentionMask {
    let n = layout.total();
    let kinds: Vec<Modality> = (0..n)
        .map(|p| layout.modality_of(p).expect("position inside layout"))
        .collect();
    let allow = kinds
        .iter()
        .flat_map(|&q| kinds.iter().map(move |&k| variant.allows(q, k)))
        .collect();
    AttentionMask { len: n, allow }
}

pub fn build_hybrid_mask(layout: &TokenLayout) -> AttentionMask {
    build(layout, MaskVariant::Hybrid)
}

pub fn build_dreamvla_mask(layout: &TokenLayout) -> AttentionMask {
    build(layout, MaskVariant::DreamVla)
}

pub fn build_mask(layout: &TokenLayout, variant: MaskVariant) -> AttentionMask {
    build(layout, variant)
}

/// Outcome of [`validate_mask`]: every `(query, key)` that disagrees with the rules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskValidation {
    pub violations: Vec<(usize, usize)>,
}

impl MaskValidation {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_mask(
    mask: &AttentionMask,
    layout: &TokenLayout,
    variant: MaskVariant,
) -> Result<MaskValidation> {
    if mask.len() != layout.total() {
        return Err(Error::shape(
            "validate_mask",
            &[mask.len()],
            &[layout.total()],
        ));
    }
    let expected = build(layout, variant);
    let violations = (0..mask.len())
        .flat_map(|q| (0..mask.len()).map(move |k| (q, k)))
        .filter(|&(q, k)| mask.get(q, k) != expected.get(q, k))
        .collect();
    Ok(MaskValidation { violations })
}
