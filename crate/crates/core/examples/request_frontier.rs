//! Relative request rate, effort length ratio and accuracy retention from
//! the bundled 64K/64K node measurements.

use std::error::Error;
use std::path::Path;

use puzzle_nas::metrics::{accuracy_retention, compute_frontier, effort_length_ratio, read_records_jsonl};

fn main() -> Result<(), Box<dyn Error>> {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/frontier_64k_node.jsonl");
    let records = read_records_jsonl(&fixture)?;
    let (points, json) = compute_frontier(&records, "gpt-oss-120B/bf16/high")?;
    println!("suites {:?} (mixed: {})", json.suites, json.mixed_suites);
    for p in &points {
        println!("{:<20} {:<5} {:<7} rate {:>7.3}  accuracy {:.2}", p.model, p.kv_precision, p.effort, p.relative_request_rate, p.avg_accuracy);
    }
    println!("effort length ratio, parent fp8: {:.2}", effort_length_ratio(13.05, 1.35)?);
    println!("effort length ratio, child fp8:  {:.2}", effort_length_ratio(14.28, 1.73)?);
    println!("retention high fp8: {:.1}%", accuracy_retention(58.67, 58.19)?);
    println!("retention low fp8:  {:.1}%", accuracy_retention(48.38, 44.71)?);
    Ok(())
}
