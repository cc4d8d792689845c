//! Turn a packet log into a fixed-length feature vector, with and without
//! the initial-burst rule of its platform.

use std::io::Cursor;

use crossvid::ingest::{parse_packet_log, ClientMarker, TraceData, TraceKey};
use crossvid::preprocess::{preprocess_pipeline, PreprocessConfig};

fn main() -> crossvid::Result<()> {
    // time,direction,size. Fast start for 100 s, then a steady trickle.
    let mut log = String::from("# demo capture\n");
    let mut t = 0.0;
    while t < 600.0 {
        let gap = if t < 100.0 { 0.05 } else { 0.2 };
        log.push_str(&format!("{t:.3},D,1400\n"));
        if ((t * 100.0) as u64).is_multiple_of(7) {
            log.push_str(&format!("{t:.3},U,60\n"));
        }
        t += gap;
    }
    let key = TraceKey::new("YT", "demo", 0);
    let trace = parse_packet_log(Cursor::new(log), &ClientMarker::Tagged, key.clone())?;
    println!("{key}: {} downlink packets", trace.downlink_count());
    let data = TraceData::Packets(trace.packets);

    let with_rule = PreprocessConfig::default();
    let without_rule = PreprocessConfig {
        platform_rules: Default::default(),
        ..PreprocessConfig::default()
    };
    for (name, config) in [("with rule", &with_rule), ("without rule", &without_rule)] {
        let fv = preprocess_pipeline(&key, &data, config)?;
        let shown: Vec<String> = fv
            .values
            .iter()
            .take(24)
            .map(|v| format!("{v:.2}"))
            .collect();
        println!("{name:>12} ({} bins): {}", fv.values.len(), shown.join(" "));
    }
    Ok(())
}
