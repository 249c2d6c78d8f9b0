fn main() {
    let t0 = std::time::Instant::now();
    let entries = textpose::train::gradcheck_suite(7);
    println!("{}", textpose::train::gradcheck_report_text(&entries));
    println!("suite in {:.1?}, all pass: {}", t0.elapsed(), entries.iter().all(|e| e.pass));
}
