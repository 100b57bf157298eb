use semsplat::metrics::MetricsReport;

const HEADER: [&str; 7] = ["config", "ATE RMSE", "PSNR", "SSIM", "LPIPS", "depth L1", "seg L1"];

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.digits$}"))
}

fn row(name: &str, m: &MetricsReport) -> [String; 7] {
    [
        name.to_string(),
        opt(m.ate_rmse, 5),
        format!("{:.2}", m.psnr),
        format!("{:.4}", m.ssim),
        "n/a".to_string(),
        opt(m.depth_l1, 5),
        format!("{:.4}", m.seg_l1),
    ]
}

/// Fixed-width table, one row per named report.
pub fn render(rows: &[(&str, &MetricsReport)]) -> String {
    let cells: Vec<[String; 7]> = rows.iter().map(|(n, m)| row(n, m)).collect();
    let mut widths = HEADER.map(str::len);
    for r in &cells {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |fields: &[String]| {
        fields
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (f, w))| if i == 0 { format!("{f:<w$}") } else { format!("{f:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&HEADER.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in &cells {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}
