//! Aggregation of per-image scores and report export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub video_id: String,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub video_id: String,
    pub images: usize,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
}

/// Conventions recorded alongside every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub task: Option<TaskKind>,
    pub epsilon: f64,
    pub skip_rule: String,
    pub std_convention: String,
    pub miou_convention: String,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self {
            task: None,
            epsilon: 1e-15,
            skip_rule: "classes absent from both masks are skipped; an image with no scored class scores 1.0".into(),
            std_convention: "population standard deviation over images".into(),
            miou_convention: "per-video mean of per-image IoU".into(),
        }
    }
}

impl ReportSettings {
    pub fn for_task(task: TaskKind) -> Self {
        Self { task: Some(task), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub mean_dice: f64,
    pub std_dice: f64,
    /// One row per video, ordered by video id.
    pub groups: Vec<GroupSummary>,
    pub settings: ReportSettings,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Builds a report from per-image rows. Rows are folded in
/// `(video_id, image_id)` order so the result does not depend on input order.
pub fn aggregate_report(rows: &[ImageScore], settings: ReportSettings) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::Empty("aggregate_report needs at least one image".into()));
    }
    for r in rows {
        for (name, v) in [("iou", r.iou), ("dice", r.dice)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} of image {} is {v}, outside [0, 1]", r.image_id)));
            }
        }
    }
    let mut per_image = rows.to_vec();
    per_image.sort_by(|a, b| (&a.video_id, &a.image_id).cmp(&(&b.video_id, &b.image_id)));

    let mut by_video: BTreeMap<&str, Vec<&ImageScore>> = BTreeMap::new();
    for r in &per_image {
        by_video.entry(&r.video_id).or_default().push(r);
    }
    let groups = by_video
        .into_iter()
        .map(|(video, rs)| {
            let (mean_iou, std_iou) = mean_std(&rs.iter().map(|r| r.iou).collect::<Vec<_>>());
            let (mean_dice, std_dice) = mean_std(&rs.iter().map(|r| r.dice).collect::<Vec<_>>());
            GroupSummary { video_id: video.to_string(), images: rs.len(), mean_iou, std_iou, mean_dice, std_dice }
        })
        .collect();
    let (mean_iou, std_iou) = mean_std(&per_image.iter().map(|r| r.iou).collect::<Vec<_>>());
    let (mean_dice, std_dice) = mean_std(&per_image.iter().map(|r| r.dice).collect::<Vec<_>>());
    Ok(MetricReport { per_image, mean_iou, std_iou, mean_dice, std_dice, groups, settings })
}

/// Percentage cell in the `mean ± std` style, e.g. `82.94 ± 16.82`.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "md" | "markdown" | "markdown-table" => Ok(Self::Markdown),
            other => Err(Error::Unsupported(format!("report format `{other}`"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
            Self::Markdown => "md",
        }
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,video_id,iou,dice\n");
        for r in &self.per_image {
            let _ = writeln!(out, "{},{},{:?},{:?}", csv_field(&r.image_id), csv_field(&r.video_id), r.iou, r.dice);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Task row with `IOU(%)` and `Dice(%)` columns.
    pub fn table_i(&self) -> String {
        let task = self.settings.task.map_or("-", |t| t.as_str());
        format!(
            "| Task | IOU(%) | Dice(%) |\n|---|---|---|\n| {task} | {} | {} |\n",
            format_cell(self.mean_iou, self.std_iou),
            format_cell(self.mean_dice, self.std_dice)
        )
    }

    /// One row per video with its mIOU (three decimals) plus an overall row.
    pub fn table_ii(&self) -> String {
        let mut out = String::from("| Dataset | Images | mIOU |\n|---|---|---|\n");
        for g in &self.groups {
            let _ = writeln!(out, "| {} | {} | {:.3} |", g.video_id, g.images, g.mean_iou);
        }
        let _ = writeln!(out, "| all | {} | {:.3} |", self.per_image.len(), self.mean_iou);
        out
    }

    pub fn to_markdown(&self) -> String {
        let s = &self.settings;
        format!(
            "{}\n{}\n- epsilon: {:e}\n- skipping: {}\n- std: {}\n- mIOU: {}\n",
            self.table_i(),
            self.table_ii(),
            s.epsilon,
            s.skip_rule,
            s.std_convention,
            s.miou_convention
        )
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Csv => Ok(self.to_csv()),
            ReportFormat::Json => self.to_json(),
            ReportFormat::Markdown => Ok(self.to_markdown()),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn export_report(report: &MetricReport, format: ReportFormat, path: &Path) -> Result<()> {
    std::fs::write(path, report.render(format)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(image: &str, video: &str, iou: f64) -> ImageScore {
        ImageScore { image_id: image.into(), video_id: video.into(), iou, dice: 2.0 * iou / (1.0 + iou) }
    }

    #[test]
    fn population_std() {
        let r = aggregate_report(&[row("a", "v", 0.8), row("b", "v", 0.9)], ReportSettings::default()).unwrap();
        assert!((r.mean_iou - 0.85).abs() < 1e-15);
        assert!((r.std_iou - 0.05).abs() < 1e-15);
        let single = aggregate_report(&[row("a", "v", 0.7)], ReportSettings::default()).unwrap();
        assert_eq!((single.mean_iou, single.std_iou), (0.7, 0.0));
    }

    #[test]
    fn groups_by_video() {
        let rows = [row("1", "v2", 0.0), row("0", "v1", 1.0), row("1", "v1", 0.5), row("0", "v2", 0.5)];
        let r = aggregate_report(&rows, ReportSettings::default()).unwrap();
        assert_eq!(r.groups.len(), 2);
        assert_eq!(r.groups[0].mean_iou, 0.75);
        assert_eq!(r.groups[1].mean_iou, 0.25);
        assert_eq!(r.mean_iou, 0.5);
        assert_eq!(r.table_ii().lines().count(), 5);
    }

    #[test]
    fn cell_format() {
        assert_eq!(format_cell(0.8294, 0.1682), "82.94 ± 16.82");
    }

    #[test]
    fn empty_and_out_of_range() {
        assert!(matches!(aggregate_report(&[], ReportSettings::default()), Err(Error::Empty(_))));
        assert!(aggregate_report(&[row("a", "v", 1.5)], ReportSettings::default()).is_err());
    }

    #[test]
    fn json_round_trip() {
        let rows = [row("a", "v1", 0.3), row("b", "v2", 0.71)];
        let r = aggregate_report(&rows, ReportSettings::for_task(TaskKind::Parts)).unwrap();
        let back = MetricReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_quotes_commas() {
        let r = aggregate_report(&[row("a,b", "v", 0.5)], ReportSettings::default()).unwrap();
        assert!(r.to_csv().contains("\"a,b\",v,0.5,"));
    }

    #[test]
    fn format_names() {
        assert_eq!("markdown-table".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
        assert!("xlsx".parse::<ReportFormat>().is_err());
    }
}
