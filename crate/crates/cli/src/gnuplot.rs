//! Data and script pairs for gnuplot: the forgetting heatmap and grouped
//! bar charts of method or ablation rows.

use std::fmt::Write;

use auvic_core::metrics::ForgettingMatrix;

pub struct Plot {
    pub data: String,
    pub script: String,
}

pub fn heatmap(m: &ForgettingMatrix, stem: &str) -> Plot {
    let mut data = String::new();
    for (i, row) in m.rates.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(data, "{i} {j} {v:.4}");
        }
        data.push('\n');
    }
    let tics: Vec<String> = m
        .identities
        .iter()
        .enumerate()
        .map(|(i, id)| format!("\"{id}\" {i}"))
        .collect();
    let tics = tics.join(", ");
    let script = format!(
        "set terminal pngcairo size 640,560\n\
         set output '{stem}.png'\n\
         set xlabel 'evaluated identity'\n\
         set ylabel 'unlearned identity'\n\
         set cbrange [0:1]\n\
         set xtics ({tics})\n\
         set ytics ({tics})\n\
         set yrange [] reverse\n\
         plot '{stem}.dat' using 2:1:3 with image notitle\n"
    );
    Plot { data, script }
}

/// Grouped bars, one group per row label and one bar per column.
pub fn bars(labels: &[String], columns: &[&str], values: &[Vec<f64>], stem: &str, ylabel: &str) -> Plot {
    let mut data = format!("label {}\n", columns.join(" "));
    for (l, row) in labels.iter().zip(values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(data, "\"{l}\" {}", cells.join(" "));
    }
    let series: Vec<String> = (0..columns.len())
        .map(|k| {
            let x = if k == 0 { ":xtic(1)" } else { "" };
            format!("'{stem}.dat' using {}{x} title columnhead", k + 2)
        })
        .collect();
    let script = format!(
        "set terminal pngcairo size 800,480\n\
         set output '{stem}.png'\n\
         set style data histograms\n\
         set style histogram clustered\n\
         set style fill solid 0.8\n\
         set ylabel '{ylabel}'\n\
         set key autotitle columnhead\n\
         plot {}\n",
        series.join(", ")
    );
    Plot { data, script }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_has_one_line_per_cell() {
        let m = ForgettingMatrix {
            identities: vec!["a".into(), "b".into()],
            rates: vec![vec![1.0, 0.5], vec![0.0, 0.75]],
            valid: vec![true, true],
            n: 3,
        };
        let p = heatmap(&m, "matrix");
        assert_eq!(p.data.lines().filter(|l| !l.is_empty()).count(), 4);
        assert!(p.data.contains("0 1 0.5000"));
        assert!(p.script.contains("'matrix.dat'") && p.script.contains("\"b\" 1"));
    }

    #[test]
    fn bars_quote_labels() {
        let p = bars(&["GA+KL".into()], &["TFA", "NTRA"], &[vec![1.0, 2.0]], "m", "%");
        assert_eq!(p.data, "label TFA NTRA\n\"GA+KL\" 1.0000 2.0000\n");
        assert!(p.script.contains("using 3 title"));
    }
}
