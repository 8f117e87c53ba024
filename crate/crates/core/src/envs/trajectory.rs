use std::io::{self, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionRecord {
    pub episode: usize,
    pub step: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Writes `episode,step,s0..,a0..,reward,done` rows. Floats use shortest
/// round-trip formatting so identical runs give identical bytes.
pub fn write_trajectory_csv<W: Write>(mut out: W, records: &[TransitionRecord]) -> io::Result<()> {
    let (ds, da) = records
        .first()
        .map(|r| (r.s.len(), r.a.len()))
        .unwrap_or((0, 0));
    let mut header = vec!["episode".to_string(), "step".to_string()];
    header.extend((0..ds).map(|i| format!("s{i}")));
    header.extend((0..da).map(|i| format!("a{i}")));
    header.push("reward".into());
    header.push("done".into());
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.episode.to_string(), r.step.to_string()];
        row.extend(r.s.iter().map(|v| format!("{v:?}")));
        row.extend(r.a.iter().map(|v| format!("{v:?}")));
        row.push(format!("{:?}", r.reward));
        row.push(u8::from(r.done).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
