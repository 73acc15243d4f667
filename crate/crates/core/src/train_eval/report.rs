use super::metrics::Metrics;

/// Markdown table of runs, best F1 first and in bold; equal F1 falls back
/// to run name order.
pub fn report(runs: &[(String, Metrics)]) -> String {
    let mut rows: Vec<&(String, Metrics)> = runs.iter().collect();
    rows.sort_by(|a, b| b.1.f1.total_cmp(&a.1.f1).then_with(|| a.0.cmp(&b.0)));
    let mut out = String::from("| Run | Precision | Recall | F1 | Macro-F1 |\n|---|---:|---:|---:|---:|\n");
    for (i, (name, m)) in rows.iter().enumerate() {
        let cells = [
            name.clone(),
            format!("{:.4}", m.precision),
            format!("{:.4}", m.recall),
            format!("{:.4}", m.f1),
            format!("{:.4}", m.macro_f1),
        ];
        let cells: Vec<String> = if i == 0 {
            cells.iter().map(|c| format!("**{c}**")).collect()
        } else {
            cells.to_vec()
        };
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    out
}
