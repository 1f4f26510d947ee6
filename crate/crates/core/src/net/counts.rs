use std::fmt::Write as _;

use crate::error::{Error, Result};

use super::config::{ModelConfig, Origin, SkipMode};
use super::model::Model;
use super::params::ParamKind;

/// Analytic conv-weight count of one decoder stage, split into named terms.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageCount {
    pub level: usize,
    pub terms: Vec<(&'static str, u64)>,
    pub total: u64,
}

fn k2(c: &ModelConfig) -> u64 {
    (c.kernel_size * c.kernel_size) as u64
}

/// Per-stage counts of the plain decoder, deepest stage first:
/// `K^2 * [c(D_{j+1}) c(D_j) + c(D_j)^2 + (c(E_j) + c(D_j)) c(D_j)]`.
pub fn count_params_unet(c: &ModelConfig) -> Result<Vec<StageCount>> {
    c.validate()?;
    if c.skip_mode != SkipMode::Plain {
        return Err(Error::Contract(format!(
            "the plain decoder count does not apply to skip mode {}",
            c.skip_mode
        )));
    }
    let k2 = k2(c);
    Ok((1..c.depth)
        .rev()
        .map(|j| {
            let (up, d, e) = (
                c.decoder_channels(j + 1) as u64,
                c.decoder_channels(j) as u64,
                c.encoder_channels(j) as u64,
            );
            let terms = vec![
                ("upsample_conv", k2 * up * d),
                ("second_conv", k2 * d * d),
                ("concat_conv", k2 * (e + d) * d),
            ];
            StageCount {
                level: j,
                total: k2 * (up * d + d * d + (e + d) * d),
                terms,
            }
        })
        .collect())
}

/// Per-stage counts of a full-scale decoder, deepest stage first:
/// `D_S^2 * [(sum c(E_k) + sum c(D_k)) * S + c(D_j)^2]` over the stage's sources.
pub fn count_params_fullscale(c: &ModelConfig) -> Result<Vec<StageCount>> {
    c.validate()?;
    if !c.skip_mode.is_full_scale() {
        return Err(Error::Contract(
            "the full-scale count does not apply to the plain decoder".into(),
        ));
    }
    let k2 = k2(c);
    let s = c.skip_branch_channels as u64;
    Ok((1..c.depth)
        .rev()
        .map(|j| {
            let spec = c.skip_spec(j);
            let enc: u64 = spec
                .sources
                .iter()
                .filter(|x| x.origin == Origin::Encoder)
                .map(|x| c.encoder_channels(x.level) as u64)
                .sum();
            let dec: u64 = spec
                .sources
                .iter()
                .filter(|x| x.origin == Origin::Decoder)
                .map(|x| c.decoder_channels(x.level) as u64)
                .sum();
            let d = c.decoder_channels(j) as u64;
            StageCount {
                level: j,
                terms: vec![("branch_convs", k2 * (enc + dec) * s), ("fusion_conv", k2 * d * d)],
                total: k2 * ((enc + dec) * s + d * d),
            }
        })
        .collect())
}

/// Conv weights of each encoder level: main conv plus 1x1 projection.
pub fn encoder_counts(c: &ModelConfig) -> Vec<u64> {
    (1..=c.depth)
        .map(|i| {
            let cin = if i == 1 {
                c.input_channels
            } else {
                c.encoder_channels(i - 1)
            } as u64;
            let cout = c.encoder_channels(i) as u64;
            let proj = if cin != cout { cin * cout } else { 0 };
            k2(c) * cin * cout + proj
        })
        .collect()
}

/// Conv weights of the gates at each decoder level (deepest first): the
/// resampler plus `M_x`, `M_y` and `phi` of every branch gate.
pub fn gate_counts(c: &ModelConfig) -> Vec<(usize, u64)> {
    if !c.gates {
        return Vec::new();
    }
    let inter = c.gate_inter_channels() as u64;
    (1..c.depth)
        .rev()
        .map(|j| {
            let n = c.skip_spec(j).sources.len() as u64;
            let (width, y_total) = if c.skip_mode.is_full_scale() {
                let s = c.skip_branch_channels as u64;
                (s, n * s)
            } else {
                let d = c.decoder_channels(j) as u64;
                (d, c.encoder_channels(j) as u64 + d)
            };
            let resampler = c.decoder_channels(j + 1) as u64 * width;
            (j, resampler + inter * y_total + n * (inter * width + inter))
        })
        .collect()
}

pub fn head_count(c: &ModelConfig) -> u64 {
    (c.decoder_channels(1) * c.num_classes) as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRow {
    pub group: String,
    pub analytic: u64,
    pub allocated: u64,
}

impl AuditRow {
    pub fn ok(&self) -> bool {
        self.analytic == self.allocated
    }
}

/// Analytic versus allocated conv-weight counts of a built model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamAudit {
    pub rows: Vec<AuditRow>,
    /// Stage terms of whichever decoder formula applies, for reporting.
    pub stage_terms: Vec<StageCount>,
    pub biases: u64,
    pub bn_params: u64,
}

impl ParamAudit {
    pub fn ok(&self) -> bool {
        self.rows.iter().all(AuditRow::ok)
    }

    pub fn analytic_total(&self) -> u64 {
        self.rows.iter().map(|r| r.analytic).sum()
    }

    pub fn allocated_total(&self) -> u64 {
        self.rows.iter().map(|r| r.allocated).sum()
    }

    /// Plain-text table, one row per group plus totals.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<16} {:>12} {:>12}  status", "group", "analytic", "allocated");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>12} {:>12}  {}",
                r.group,
                r.analytic,
                r.allocated,
                if r.ok() { "ok" } else { "MISMATCH" }
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12}  {}",
            "total",
            self.analytic_total(),
            self.allocated_total(),
            if self.ok() { "ok" } else { "MISMATCH" }
        );
        for st in &self.stage_terms {
            let terms: Vec<String> = st.terms.iter().map(|(n, v)| format!("{n}={v}")).collect();
            let _ = writeln!(s, "dec{} terms: {}", st.level, terms.join(" "));
        }
        let _ = writeln!(s, "biases {}  batch_norm {}", self.biases, self.bn_params);
        s
    }
}

/// Compares every analytic count against the weights the model actually holds.
pub fn audit(model: &Model) -> Result<ParamAudit> {
    let c = model.config();
    let mut rows = Vec::new();
    for (block, analytic) in model.encoder.iter().zip(encoder_counts(c)) {
        let allocated =
            block.conv.weight_count() + block.projection.as_ref().map_or(0, |p| p.weight_count());
        rows.push(AuditRow {
            group: format!("enc{}", block.level),
            analytic,
            allocated,
        });
    }
    let stage_terms = if c.skip_mode.is_full_scale() {
        count_params_fullscale(c)?
    } else {
        count_params_unet(c)?
    };
    for st in &stage_terms {
        let stage = &model.decoder[st.level - 1];
        let allocated: u64 = stage
            .branches
            .iter()
            .filter_map(|b| b.conv())
            .map(|cv| cv.weight_count())
            .chain(stage.fuse.iter().map(|f| f.conv.weight_count()))
            .sum();
        rows.push(AuditRow {
            group: format!("dec{}", st.level),
            analytic: st.total,
            allocated,
        });
    }
    for (j, analytic) in gate_counts(c) {
        let allocated = model.decoder[j - 1].gates.as_ref().map_or(0, |sg| {
            sg.resampler.conv.weight_count()
                + sg.gates.iter().map(|g| g.weight_count()).sum::<u64>()
        });
        rows.push(AuditRow {
            group: format!("dec{j}.gates"),
            analytic,
            allocated,
        });
    }
    rows.push(AuditRow {
        group: "head".into(),
        analytic: head_count(c),
        allocated: model.head.weight_count(),
    });
    let store = model.store();
    let audit = ParamAudit {
        rows,
        stage_terms,
        biases: store.numel_of(ParamKind::Bias),
        bn_params: store.numel_of(ParamKind::BnGamma) + store.numel_of(ParamKind::BnBeta),
    };
    let weights = store.numel_of(ParamKind::ConvWeight);
    if audit.ok() && audit.allocated_total() != weights {
        return Err(Error::Contract(format!(
            "audit covered {} conv weights but the registry holds {weights}",
            audit.allocated_total()
        )));
    }
    Ok(audit)
}
