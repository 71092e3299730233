//! Static SVG timelines: ground-truth windows, ranked predictions and the
//! saliency curve on a shared time axis.

use std::fmt::Write;

use qdvmr::detrhead::PredictionRecord;
use qdvmr::featurestore::SampleRecord;

/// Horizontal scale of the time axis.
pub const PX_PER_SEC: f64 = 6.0;
/// Left and right padding around the axis.
pub const MARGIN: f64 = 40.0;

const BAR_H: f64 = 14.0;
const ROW_GAP: f64 = 6.0;
const CURVE_H: f64 = 60.0;
const MAX_PREDS: usize = 5;

pub fn x_of(t: f64) -> f64 {
    MARGIN + t * PX_PER_SEC
}

pub fn file_name(sample_id: &str) -> String {
    let safe: String = sample_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.svg")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub fn render(rec: &SampleRecord, pred: &PredictionRecord) -> String {
    let width = x_of(rec.duration) + MARGIN;
    let moments = pred.moments();
    let shown = &moments[..moments.len().min(MAX_PREDS)];
    let gt_top = 40.0;
    let pred_top = gt_top + rec.moments.len() as f64 * (BAR_H + ROW_GAP) + 20.0;
    let curve_top = pred_top + shown.len() as f64 * (BAR_H + ROW_GAP) + 20.0;
    let axis_y = curve_top + CURVE_H + 10.0;
    let height = axis_y + 30.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}" data-px-per-sec="{PX_PER_SEC}" data-margin="{MARGIN}">"#
    );
    let _ = writeln!(
        svg,
        "<style>text{{font:11px sans-serif}} .gt{{fill:#2e7d32}} .pred{{fill:#1565c0}} .saliency{{fill:none;stroke:#e65100;stroke-width:1.5}} .label{{fill:#9e9e9e}}</style>"
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="16">{}: {}</text>"#,
        escape(&rec.sample_id),
        escape(&rec.query_text)
    );

    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.1}">GT</text>"#,
        gt_top + BAR_H - 3.0
    );
    for (i, m) in rec.moments.iter().enumerate() {
        let y = gt_top + i as f64 * (BAR_H + ROW_GAP);
        let _ = writeln!(
            svg,
            r#"<rect class="gt" data-start="{}" data-end="{}" x="{:.3}" y="{y:.1}" width="{:.3}" height="{BAR_H}"/>"#,
            m.start(),
            m.end(),
            x_of(m.start()),
            m.length() * PX_PER_SEC
        );
    }

    let _ = writeln!(
        svg,
        r#"<text x="4" y="{:.1}">Pred</text>"#,
        pred_top + BAR_H - 3.0
    );
    for (i, m) in shown.iter().enumerate() {
        let y = pred_top + i as f64 * (BAR_H + ROW_GAP);
        let opacity = m.score.clamp(0.15, 1.0);
        let _ = writeln!(
            svg,
            r#"<rect class="pred" data-start="{}" data-end="{}" data-score="{}" x="{:.3}" y="{y:.1}" width="{:.3}" height="{BAR_H}" fill-opacity="{opacity:.3}"/>"#,
            m.start,
            m.end,
            m.score,
            x_of(m.start),
            (m.end - m.start) * PX_PER_SEC
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{:.1}">{:.2}</text>"#,
            x_of(m.end) + 4.0,
            y + BAR_H - 3.0,
            m.score
        );
    }

    let scores = &pred.pred_saliency_scores;
    if !scores.is_empty() {
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let points: Vec<String> = scores
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let t = ((i as f64 + 0.5) * rec.clip_len).min(rec.duration);
                let y = curve_top + CURVE_H * (1.0 - (s - lo) / span);
                format!("{:.2},{y:.2}", x_of(t))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<text x="4" y="{:.1}">Sal</text>"#,
            curve_top + CURVE_H / 2.0
        );
        let _ = writeln!(
            svg,
            r#"<polyline class="saliency" points="{}"/>"#,
            points.join(" ")
        );
    }

    let _ = writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{axis_y:.1}\" x2=\"{:.3}\" y2=\"{axis_y:.1}\" stroke=\"#424242\"/>",
        x_of(rec.duration)
    );
    let step = if rec.duration > 120.0 { 20.0 } else { 10.0 };
    let mut t = 0.0;
    while t <= rec.duration + 1e-9 {
        let _ = writeln!(
            svg,
            r#"<text class="label" x="{:.3}" y="{:.1}" text-anchor="middle">{t}s</text>"#,
            x_of(t),
            axis_y + 14.0
        );
        t += step;
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use qdvmr::detrhead::RankedMoment;
    use qdvmr::featurestore::Moment;

    fn record() -> SampleRecord {
        SampleRecord {
            sample_id: "s1".into(),
            video_id: "v1".into(),
            query_text: "a <b> & c".into(),
            query_token_ids: vec![1, 2],
            duration: 20.0,
            clip_len: 2.0,
            moments: vec![Moment(4.0, 10.0)],
            clip_relevance: vec![0, 0, 1, 1, 1, 0, 0, 0, 0, 0],
            saliency_labels: None,
            split: "train".into(),
            mask_positions: None,
            video_feat: "v.qdt".into(),
            text_feat: "t.qdt".into(),
            masked_text_feat: None,
            audio_feat: None,
        }
    }

    #[test]
    fn gt_bar_coordinates_and_escaping() {
        let moments = [RankedMoment {
            start: 3.0,
            end: 9.0,
            score: 0.8,
        }];
        let pred = PredictionRecord::new("s1", &moments, vec![0.1; 10]);
        let svg = render(&record(), &pred);
        assert!(svg.contains(r#"<rect class="gt" data-start="4" data-end="10" x="64.000" "#));
        assert!(svg.contains(r#"width="36.000""#));
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
        assert!(svg.contains(r#"class="pred""#));
        assert!(svg.contains(r#"class="saliency""#));
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_name("a/b c"), "a_b_c.svg");
    }
}
