fn main() {
    let t0 = std::time::Instant::now();
    for v in cuefuse_core::fusion::Variant::ALL {
        let t = std::time::Instant::now();
        let r = cuefuse_core::gradcheck::check_full_pipeline(v, 4, 11).unwrap();
        println!("{v}: {r}   ({:.2}s)", t.elapsed().as_secs_f64());
        assert!(r.passes(1e-4), "{v} failed: {r}");
    }
    println!("total {:.2}s", t0.elapsed().as_secs_f64());
}
