//! Analytic per-clip FLOP and parameter counts. FLOPs are counted as two per
//! multiply-accumulate; additions, divisions and exponentials count one each.

use std::fmt::Write as _;

use crate::model::{ModelConfig, NUM_CLASSES};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    /// Sum over every `*.attention` entry (scores, softmax and aggregation).
    pub fn attention_flops(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.ends_with(".attention"))
            .map(|e| e.flops)
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// `name,flops,params` rows after a `#` line stating the convention, then a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("# flops = 2 x multiply-accumulates, per clip\nname,flops,params\n");
        for e in &self.entries {
            writeln!(s, "{},{},{}", e.name, e.flops, e.params).expect("write to string");
        }
        writeln!(s, "total,{},{}", self.total_flops(), self.total_params()).expect("write to string");
        s
    }

    fn push(&mut self, name: impl Into<String>, flops: u64, params: u64) {
        self.entries.push(CostEntry {
            name: name.into(),
            flops,
            params,
        });
    }
}

fn conv(cout: u64, cin: u64, k: u64, out_h: u64, out_w: u64, t: u64) -> (u64, u64) {
    (2 * cout * cin * k * k * out_h * out_w * t, cout * cin * k * k + cout)
}

pub fn count_cost(cfg: &ModelConfig) -> Result<CostReport> {
    cfg.validate()?;
    let u = |v: usize| v as u64;
    let (t, c, s) = (u(cfg.frames), u(cfg.channels), u(cfg.cte_stride));
    let (h, w) = (u(cfg.token_height()), u(cfg.token_width()));
    let hidden = c * u(cfg.ffn_ratio);
    let heads = u(cfg.scales.len());
    let c_h = c / heads;
    let map = t * c * h * w;

    let mut r = CostReport::default();
    let (f, p) = conv(c, 3, s, h, w, t);
    r.push("cte", f, p);
    for i in 0..cfg.depth {
        for name in ["q", "k", "v"] {
            let (f, p) = conv(c, c, 3, h, w, t);
            r.push(format!("layers.{i}.{name}"), f, p);
        }
        for (j, &l) in cfg.scales.iter().enumerate() {
            let l = u(l);
            let n = t * l * l;
            let d = c_h * (h / l) * (w / l);
            r.push(format!("layers.{i}.head{j}.attention"), 2 * n * n * d + n * n + 2 * n * n * d, 0);
        }
        r.push(format!("layers.{i}.residual"), 2 * map, 0);
        // mean, variance, normalize, affine
        r.push(format!("layers.{i}.norm"), 5 * map, 2 * c);
        let (f1, p1) = conv(hidden, c, 1, h, w, t);
        let (f2, p2) = conv(c, hidden, 1, h, w, t);
        r.push(format!("layers.{i}.ffn"), f1 + f2, p1 + p2);
    }
    let classes = u(NUM_CLASSES);
    r.push("head", map + 2 * c * classes, c * classes + classes);
    Ok(r)
}
