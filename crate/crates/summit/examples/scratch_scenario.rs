fn main() {
    env_logger::init();
    let name = std::env::args().nth(1).unwrap_or_else(|| "sanity-learnable".into());
    let t = std::time::Instant::now();
    match summit::scenario::run_scenario(&name) {
        Ok(o) => {
            println!("{}: passed={} soft={} ({:.1}s)", o.name, o.passed, o.soft, t.elapsed().as_secs_f64());
            for d in &o.details { println!("  {d}"); }
        }
        Err(e) => println!("error: {e}"),
    }
}
