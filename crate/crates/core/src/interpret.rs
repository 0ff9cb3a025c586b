//! Reading learned sub-networks out of attention traces.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::data::SubjectRecord;
use crate::error::{Error, Result};
use crate::model::{forward, AttentionTrace, ModelConfig, ModelParams, Mode};

pub const SUPPORT_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct SubnetworkAssignment {
    /// K × n, rows on the simplex.
    pub soft: Matrix,
    /// Per node, the subgraph with the largest soft weight (lowest index on ties).
    pub hard: Vec<usize>,
    /// Per subgraph, ascending node indices with soft weight above the threshold.
    pub support: Vec<Vec<usize>>,
}

impl SubnetworkAssignment {
    pub fn from_soft(soft: Matrix, threshold: f64) -> Self {
        let hard = soft
            .axis_iter(Axis(1))
            .map(|col| {
                let mut best = 0;
                for (k, &v) in col.iter().enumerate() {
                    if v > col[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        let support = soft
            .axis_iter(Axis(0))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &v)| v > threshold)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        Self { soft, hard, support }
    }

    pub fn k(&self) -> usize {
        self.soft.nrows()
    }

    pub fn n(&self) -> usize {
        self.soft.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgraphImportance {
    /// Length K, sums to 1.
    pub weights: Vec<f64>,
    /// Subgraph indices by descending weight (lowest index first on ties).
    pub ranking: Vec<usize>,
}

impl SubgraphImportance {
    /// Drops the graph-token self weight (index 0) and renormalizes.
    pub fn from_graph_attention(mean: &[f64]) -> Self {
        let tail = &mean[1..];
        let s: f64 = tail.iter().sum();
        let weights: Vec<f64> = if s > 0.0 {
            tail.iter().map(|v| v / s).collect()
        } else {
            vec![1.0 / tail.len() as f64; tail.len()]
        };
        let mut ranking: Vec<usize> = (0..weights.len()).collect();
        ranking.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
        Self { weights, ranking }
    }
}

fn check_cohort(cfg: &ModelConfig, cohort: &[&SubjectRecord]) -> Result<()> {
    if cohort.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for s in cohort {
        if s.matrix.n() != cfg.n {
            return Err(Error::ShapeMismatch(format!(
                "subject {} has n={}, checkpoint expects {}",
                s.id,
                s.matrix.n(),
                cfg.n
            )));
        }
    }
    Ok(())
}

/// Eval-mode traces for every subject, in cohort order.
pub fn collect_traces(
    params: &ModelParams,
    cfg: &ModelConfig,
    cohort: &[&SubjectRecord],
) -> Result<Vec<AttentionTrace>> {
    check_cohort(cfg, cohort)?;
    cohort
        .par_iter()
        .map(|s| forward(s.matrix.values().view(), params, cfg, Mode::Eval).map(|o| o.trace))
        .collect()
}

/// Mean final-layer node→subgraph map over traces, rows renormalized.
pub fn assignment_from_traces(traces: &[AttentionTrace]) -> Result<SubnetworkAssignment> {
    let first = traces.first().ok_or(Error::EmptyDataset)?;
    let shape = last_layer(first)?.dim();
    let mut sum = Array2::<f64>::zeros(shape);
    for t in traces {
        sum += last_layer(t)?;
    }
    for mut row in sum.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    Ok(SubnetworkAssignment::from_soft(sum, SUPPORT_THRESHOLD))
}

fn last_layer(t: &AttentionTrace) -> Result<&Matrix> {
    t.layers
        .last()
        .map(|l| &l.node_to_subgraph)
        .ok_or_else(|| Error::ShapeMismatch("trace has no layers".into()))
}

/// Mean subgraph→graph weights over traces, graph self-weight excluded.
pub fn importance_from_traces(traces: &[AttentionTrace]) -> Result<SubgraphImportance> {
    let first = traces.first().ok_or(Error::EmptyDataset)?;
    let mut mean = vec![0.0; first.subgraph_to_graph.len()];
    for t in traces {
        for (m, v) in mean.iter_mut().zip(&t.subgraph_to_graph) {
            *m += v / traces.len() as f64;
        }
    }
    Ok(SubgraphImportance::from_graph_attention(&mean))
}

pub fn aggregate_assignments(
    params: &ModelParams,
    cfg: &ModelConfig,
    cohort: &[&SubjectRecord],
) -> Result<SubnetworkAssignment> {
    assignment_from_traces(&collect_traces(params, cfg, cohort)?)
}

pub fn rank_subgraphs(
    params: &ModelParams,
    cfg: &ModelConfig,
    cohort: &[&SubjectRecord],
) -> Result<SubgraphImportance> {
    importance_from_traces(&collect_traces(params, cfg, cohort)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtlasOverlap {
    /// Distinct atlas labels in order of first appearance; the table's columns.
    pub networks: Vec<String>,
    /// K × networks.len(), rows sum to 1.
    pub table: Matrix,
}

/// Share of each subgraph's hard-assigned nodes falling in each atlas network.
/// Subgraphs with no hard-assigned nodes get a uniform row.
pub fn atlas_overlap(
    assign: &SubnetworkAssignment,
    atlas_labels: Option<&[String]>,
) -> Result<AtlasOverlap> {
    let labels = atlas_labels.ok_or(Error::MissingAtlasLabels)?;
    if labels.len() != assign.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} atlas labels for {} nodes",
            labels.len(),
            assign.n()
        )));
    }
    let mut networks: Vec<String> = Vec::new();
    for l in labels {
        if !networks.contains(l) {
            networks.push(l.clone());
        }
    }
    let col = |l: &String| networks.iter().position(|n| n == l).unwrap();
    let mut table = Array2::<f64>::zeros((assign.k(), networks.len()));
    for (node, &k) in assign.hard.iter().enumerate() {
        table[[k, col(&labels[node])]] += 1.0;
    }
    for (k, mut row) in table.axis_iter_mut(Axis(0)).enumerate() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            log::warn!("subgraph {k} has no hard-assigned nodes; using a uniform atlas row");
            row.fill(1.0 / networks.len() as f64);
        }
    }
    Ok(AtlasOverlap { networks, table })
}

pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<_> = a.iter().collect();
    let b: BTreeSet<_> = b.iter().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

fn matrix_csv(header: &[String], rows: impl Iterator<Item = (String, Vec<f64>)>) -> String {
    let mut out = String::from("row");
    for h in header {
        out.push(',');
        out.push_str(h);
    }
    out.push('\n');
    for (name, values) in rows {
        out.push_str(&name);
        for v in values {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`export_report`] back into (column names, values).
pub fn parse_matrix_csv(text: &str) -> std::result::Result<(Vec<String>, Matrix), String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or("empty file")?
        .split(',')
        .skip(1)
        .map(str::to_string)
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').skip(1).collect();
        if cells.len() != header.len() {
            return Err(format!("row {rows} has {} cells", cells.len()));
        }
        for c in cells {
            data.push(c.parse::<f64>().map_err(|e| format!("row {rows}: {e}"))?);
        }
        rows += 1;
    }
    let m = Array2::from_shape_vec((rows, header.len()), data).map_err(|e| e.to_string())?;
    Ok((header, m))
}

/// Writes `soft_assignment.csv`, `atlas_overlap.csv` (if present),
/// `importance.csv` and `subgraph_nodes.csv`. Returns the files written.
pub fn export_report(
    assign: &SubnetworkAssignment,
    overlap: Option<&AtlasOverlap>,
    importance: &SubgraphImportance,
    atlas_labels: Option<&[String]>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    let sg = |k: usize| format!("sg{k}");

    let nodes: Vec<String> = (0..assign.n()).map(|i| format!("node{i}")).collect();
    write(
        "soft_assignment.csv",
        matrix_csv(
            &nodes,
            assign
                .soft
                .axis_iter(Axis(0))
                .enumerate()
                .map(|(k, r)| (sg(k), r.to_vec())),
        ),
    )?;
    if let Some(o) = overlap {
        write(
            "atlas_overlap.csv",
            matrix_csv(
                &o.networks,
                o.table
                    .axis_iter(Axis(0))
                    .enumerate()
                    .map(|(k, r)| (sg(k), r.to_vec())),
            ),
        )?;
    }
    let cols: Vec<String> = (0..importance.weights.len()).map(sg).collect();
    write(
        "importance.csv",
        matrix_csv(&cols, std::iter::once(("weight".to_string(), importance.weights.clone()))),
    )?;

    let mut list = String::from("subgraph,rank,node,atlas_label,weight\n");
    for (rank, &k) in importance.ranking.iter().enumerate() {
        for &node in &assign.support[k] {
            let label = atlas_labels.map(|l| l[node].as_str()).unwrap_or("");
            list.push_str(&format!(
                "{k},{},{node},{label},{:e}\n",
                rank + 1,
                assign.soft[[k, node]]
            ));
        }
    }
    write("subgraph_nodes.csv", list)?;
    Ok(written)
}
