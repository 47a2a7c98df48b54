//! Every stage of the bundled toy run in a scratch directory: score, search,
//! assemble, quantize, eval and frontier.

use std::error::Error;
use std::path::Path;
use std::time::Instant;

use puzzle_nas::pipeline::{files, Run, RunConfig};

fn main() -> Result<(), Box<dyn Error>> {
    let config = RunConfig::load(Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.json"))?;
    let dir = std::env::temp_dir().join(format!("puzzle-toy-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    let run = Run::new(&dir, config)?;
    let start = Instant::now();
    let points = run.run_all()?;
    println!("pipeline finished in {:.1} s, artifacts in {}", start.elapsed().as_secs_f64(), dir.display());
    print!("{}", std::fs::read_to_string(dir.join(files::SEARCH_TABLE))?);
    for p in points {
        println!("{:<18} {:<5} {:<7} rate {:>7.3}  accuracy {:.2}", p.model, p.kv_precision, p.effort, p.relative_request_rate, p.avg_accuracy);
    }
    Ok(())
}
