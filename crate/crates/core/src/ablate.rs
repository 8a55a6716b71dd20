//! Ablation rows: segmentor structure, fusion sub-modules and knowledge
//! injection, each trained and evaluated under one shared base config.

use serde::{Deserialize, Serialize};

use crate::config::{AuxSource, Mode, RunConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions};
use crate::metrics::MetricReport;
use crate::synth::Dataset;
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Image-only baseline growing into the full dual-stream segmentor.
    Structure,
    /// Leave-one-out over the fusion sub-modules.
    SubModules,
    /// Leave-one-out over the three per-level fusion modules.
    Fusion,
    /// Knowledge learner variants with the auxiliary image withheld.
    Knowledge,
}

#[derive(Clone, Debug)]
pub struct Row {
    pub group: Group,
    pub name: &'static str,
    pub config: RunConfig,
    pub eval: EvalOptions,
}

fn row(group: Group, name: &'static str, base: &RunConfig, edit: impl FnOnce(&mut RunConfig)) -> Row {
    let mut config = base.clone();
    edit(&mut config);
    Row {
        group,
        name,
        config,
        eval: EvalOptions::default(),
    }
}

fn bare(c: &mut RunConfig) {
    let m = &mut c.model;
    m.enable_lsfm = false;
    m.enable_ffm = false;
    m.enable_ssfm = false;
    m.enable_ckler = false;
    m.enable_injection = false;
    c.train.aux_source = AuxSource::Real;
}

pub fn structure_rows(base: &RunConfig) -> Vec<Row> {
    vec![
        row(Group::Structure, "rgb_only", base, |c| {
            bare(c);
            c.model.mode = Mode::RgbOnly;
        }),
        row(Group::Structure, "+E_u", base, |c| bare(c)),
        row(Group::Structure, "+SSFM", base, |c| {
            bare(c);
            c.model.enable_ssfm = true;
        }),
        row(Group::Structure, "+LSFM", base, |c| {
            bare(c);
            c.model.enable_ssfm = true;
            c.model.enable_lsfm = true;
        }),
        row(Group::Structure, "full", base, |c| {
            bare(c);
            c.model.enable_ssfm = true;
            c.model.enable_lsfm = true;
            c.model.enable_ffm = true;
        }),
    ]
}

pub fn fusion_rows(base: &RunConfig) -> Vec<Row> {
    let full = |c: &mut RunConfig| {
        bare(c);
        c.model.enable_ssfm = true;
        c.model.enable_lsfm = true;
        c.model.enable_ffm = true;
    };
    vec![
        row(Group::Fusion, "-LSFM", base, |c| {
            full(c);
            c.model.enable_lsfm = false;
        }),
        row(Group::Fusion, "-SSFM", base, |c| {
            full(c);
            c.model.enable_ssfm = false;
        }),
        row(Group::Fusion, "-FFM", base, |c| {
            full(c);
            c.model.enable_ffm = false;
        }),
        row(Group::Fusion, "full", base, full),
    ]
}

pub fn submodule_rows(base: &RunConfig) -> Vec<Row> {
    let full = |c: &mut RunConfig| {
        bare(c);
        c.model.enable_ssfm = true;
        c.model.enable_lsfm = true;
        c.model.enable_ffm = true;
    };
    vec![
        row(Group::SubModules, "-g_w", base, |c| {
            full(c);
            c.model.enable_gate = false;
        }),
        row(Group::SubModules, "-SSM", base, |c| {
            full(c);
            c.model.enable_ssm = false;
        }),
        row(Group::SubModules, "-CSSM", base, |c| {
            full(c);
            c.model.enable_cssm = false;
        }),
        row(Group::SubModules, "full", base, full),
    ]
}

/// The auxiliary image is withheld at test time in every row, so the
/// segmentor sees only what the knowledge learner provides.
pub fn knowledge_rows(base: &RunConfig) -> Vec<Row> {
    let with_ckler = |c: &mut RunConfig| {
        bare(c);
        c.model.enable_ssfm = true;
        c.model.enable_lsfm = true;
        c.model.enable_ffm = true;
        c.model.enable_ckler = true;
    };
    let mut rows = vec![
        row(Group::Knowledge, "w/o Know-Vec.", base, |c| {
            with_ckler(c);
            c.train.aux_source = AuxSource::Pseudo;
        }),
        row(Group::Knowledge, "Only Know-Vec.", base, |c| {
            with_ckler(c);
            c.model.enable_injection = true;
            c.train.aux_source = AuxSource::Zero;
        }),
        row(Group::Knowledge, "full", base, |c| {
            with_ckler(c);
            c.model.enable_injection = true;
            c.train.aux_source = AuxSource::Pseudo;
        }),
    ];
    for r in &mut rows {
        r.eval = EvalOptions {
            source: r.config.train.aux_source,
            withhold_aux: true,
            crop: 1.0,
        };
    }
    rows
}

pub fn all_rows(base: &RunConfig) -> Vec<Row> {
    let mut rows = structure_rows(base);
    rows.extend(submodule_rows(base));
    rows.extend(fusion_rows(base));
    rows.extend(knowledge_rows(base));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub group: Group,
    pub name: String,
    pub final_l_s: f64,
    pub report: MetricReport,
}

/// Trains and evaluates one row.
pub fn run_row(row: &Row, data: &Dataset) -> Result<RowResult> {
    let (state, log) = train(&row.config, data)?;
    let report = evaluate(&state.model, row.name, &data.test, &row.eval)?;
    Ok(RowResult {
        group: row.group,
        name: row.name.to_string(),
        final_l_s: log.last().map_or(f64::NAN, |e| e.l_s),
        report,
    })
}

/// Rows are run sequentially in the given order.
pub fn run_rows(rows: &[Row], data: &Dataset, mut on_row: impl FnMut(&RowResult)) -> Result<Vec<RowResult>> {
    rows.iter()
        .map(|r| {
            let res = run_row(r, data)?;
            on_row(&res);
            Ok(res)
        })
        .collect()
}
