use std::path::PathBuf;

/// Locates a local copy of a public dataset by file-name stem, looking in
/// `$BAL_DATA_DIR` and the workspace-level `data/` directory.
pub fn find_dataset(stem: &str) -> Option<PathBuf> {
    let mut roots: Vec<PathBuf> = Vec::new();
    if let Ok(dir) = std::env::var("BAL_DATA_DIR") {
        roots.push(PathBuf::from(dir));
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    roots.push(manifest.join("../../data"));
    roots.push(PathBuf::from("data"));
    for root in roots {
        let Ok(entries) = std::fs::read_dir(&root) else {
            continue;
        };
        for entry in entries.flatten() {
            if entry.file_name().to_string_lossy().starts_with(stem) {
                return Some(entry.path());
            }
        }
    }
    None
}
