//! Metrics report: one `key = value` pair per line with a fixed key set, so
//! reports from different runs diff cleanly. Absent values read `na`.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::IoError;
use crate::patchmask::NUM_PARTS;
use crate::train::{ClassAccuracy, FlowMetrics, PartIou};

pub const SCHEMA: &str = "pcvu-metrics/1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub steps: usize,
    pub first: f64,
    pub last: f64,
}

impl LossSummary {
    pub fn from_curve(losses: &[f64]) -> Option<Self> {
        Some(Self {
            steps: losses.len(),
            first: *losses.first()?,
            last: *losses.last()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub action: Option<ClassAccuracy>,
    pub mpjpe_mm: Option<f64>,
    pub flow: Option<FlowMetrics>,
    pub parts: Option<PartIou>,
    pub loss: Option<LossSummary>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("schema", SCHEMA.into());
        let a = self.action.as_ref();
        kv("action.classes", a.map_or(0, |a| a.per_class.len()).to_string());
        kv("action.present", a.map_or(0, |a| a.present).to_string());
        kv("action.macc", opt(a.map(|a| a.macc)));
        if let Some(a) = a {
            for (i, c) in a.per_class.iter().enumerate() {
                kv(&format!("action.class.{i}"), opt(*c));
            }
        }
        kv("pose.mpjpe_mm", opt(self.mpjpe_mm));
        let f = self.flow.as_ref();
        kv("flow.count", f.map_or(0, |f| f.count).to_string());
        kv("flow.epe", opt(f.map(|f| f.epe)));
        kv("flow.acc_strict", opt(f.map(|f| f.acc_strict)));
        kv("flow.acc_relax", opt(f.map(|f| f.acc_relax)));
        kv("flow.outlier", opt(f.map(|f| f.outlier)));
        let p = self.parts.as_ref();
        kv("parts.miou", opt(p.map(|p| p.miou)));
        for i in 0..NUM_PARTS {
            kv(&format!("parts.iou.{i}"), opt(p.and_then(|p| p.per_part[i])));
        }
        let l = self.loss.as_ref();
        kv("loss.steps", l.map_or(0, |l| l.steps).to_string());
        kv("loss.first", opt(l.map(|l| l.first)));
        kv("loss.last", opt(l.map(|l| l.last)));
        s
    }

    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| IoError::Report(format!("line {}: expected key = value", n + 1)))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(IoError::Report(format!("duplicate key {}", k.trim())));
            }
        }
        let mut p = Fields { map };
        if p.take("schema")? != SCHEMA {
            return Err(IoError::Report("unsupported schema".into()));
        }
        let classes: usize = p.int("action.classes")?;
        let present: usize = p.int("action.present")?;
        let macc = p.num("action.macc")?;
        let per_class = (0..classes)
            .map(|i| p.num(&format!("action.class.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let action = match macc {
            Some(macc) => Some(ClassAccuracy { per_class, macc, present }),
            None if classes == 0 => None,
            None => return Err(IoError::Report("action.macc missing while classes are listed".into())),
        };
        let mpjpe_mm = p.num("pose.mpjpe_mm")?;
        let count = p.int("flow.count")?;
        let flow_vals = [
            p.num("flow.epe")?,
            p.num("flow.acc_strict")?,
            p.num("flow.acc_relax")?,
            p.num("flow.outlier")?,
        ];
        let flow = match flow_vals {
            [Some(epe), Some(acc_strict), Some(acc_relax), Some(outlier)] => Some(FlowMetrics {
                epe,
                acc_strict,
                acc_relax,
                outlier,
                count,
            }),
            [None, None, None, None] => None,
            _ => return Err(IoError::Report("flow metrics are only partly present".into())),
        };
        let miou = p.num("parts.miou")?;
        let mut per_part = [None; NUM_PARTS];
        for (i, slot) in per_part.iter_mut().enumerate() {
            *slot = p.num(&format!("parts.iou.{i}"))?;
        }
        let parts = miou.map(|miou| PartIou { per_part, miou });
        let steps = p.int("loss.steps")?;
        let loss = match (p.num("loss.first")?, p.num("loss.last")?) {
            (Some(first), Some(last)) => Some(LossSummary { steps, first, last }),
            _ => None,
        };
        if let Some(k) = p.map.keys().next() {
            return Err(IoError::Report(format!("unknown key {k}")));
        }
        let r = Self {
            action,
            mpjpe_mm,
            flow,
            parts,
            loss,
        };
        r.check()?;
        Ok(r)
    }

    /// Rates lie in [0, 1] and mAcc is the mean of the present classes.
    pub fn check(&self) -> Result<(), IoError> {
        let rate = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(IoError::Report(format!("{name} = {v} outside [0, 1]")))
            }
        };
        if let Some(a) = &self.action {
            let present: Vec<f64> = a.per_class.iter().flatten().copied().collect();
            present.iter().try_for_each(|v| rate("action.class", *v))?;
            rate("action.macc", a.macc)?;
            let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
            if present.len() != a.present || (mean - a.macc).abs() > 1e-9 {
                return Err(IoError::Report("action.macc is not the mean of the present classes".into()));
            }
        }
        if let Some(f) = &self.flow {
            rate("flow.acc_strict", f.acc_strict)?;
            rate("flow.acc_relax", f.acc_relax)?;
            rate("flow.outlier", f.outlier)?;
        }
        if let Some(p) = &self.parts {
            rate("parts.miou", p.miou)?;
            p.per_part.iter().flatten().try_for_each(|v| rate("parts.iou", *v))?;
        }
        Ok(())
    }
}

struct Fields {
    map: BTreeMap<String, String>,
}

impl Fields {
    fn take(&mut self, k: &str) -> Result<String, IoError> {
        self.map
            .remove(k)
            .ok_or_else(|| IoError::Report(format!("missing key {k}")))
    }

    fn int(&mut self, k: &str) -> Result<usize, IoError> {
        let v = self.take(k)?;
        v.parse().map_err(|_| IoError::Report(format!("{k}: '{v}' is not a count")))
    }

    fn num(&mut self, k: &str) -> Result<Option<f64>, IoError> {
        let v = self.take(k)?;
        if v == "na" {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| IoError::Report(format!("{k}: '{v}' is not a number")))
    }
}

/// Loss curve as `step,loss` rows.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}
