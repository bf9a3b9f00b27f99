//! Regenerates `fixtures/scripted/provider.json` from the fixture rule book.

use tmem_testkit::fixtures::provider_script_path;

fn main() -> anyhow::Result<()> {
    let script = tmem_testkit::compile_provider_script()?;
    let path = provider_script_path();
    std::fs::create_dir_all(path.parent().expect("script path has a parent"))?;
    std::fs::write(&path, script.to_pretty_json())?;
    println!("wrote {} responses to {}", script.len(), path.display());
    Ok(())
}
