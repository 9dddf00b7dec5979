// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tlens::synth::{generate, SynthConfig};

pub fn tlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlens")).args(args).output().expect("spawn tlens")
}

pub fn run_ok(args: &[&str]) {
    let out = tlens(args);
    assert!(
        out.status.success(),
        "tlens {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Small corpus, tasks, a tiny model with checkpoints and a tuned lens.
pub struct Fixture {
    pub dir: PathBuf,
}

impl Fixture {
    pub fn path(&self, name: &str) -> String {
        self.dir.join(name).display().to_string()
    }

    pub fn build(dir: &Path) -> Fixture {
        let data = generate(&SynthConfig {
            n_reviews: 400,
            n_sentiment_items: 24,
            n_entities: 8,
            n_fact_lines: 300,
            ..Default::default()
        })
        .unwrap();
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join("corpus.txt"), &data.corpus).unwrap();
        fs::write(dir.join("sentiment.jsonl"), data.sentiment.to_jsonl().unwrap()).unwrap();
        fs::write(dir.join("facts.jsonl"), data.facts.to_jsonl().unwrap()).unwrap();
        let f = Fixture { dir: dir.to_path_buf() };
        run_ok(&[
            "train-model", "--corpus", &f.path("corpus.txt"), "--config", "tiny", "--steps", "20",
            "--batch-size", "4", "--seq-len", "32", "--checkpoint-every", "10", "--out", &f.path("model"),
        ]);
        run_ok(&[
            "train-lens", "--model", &f.path("model/model.tlns"), "--corpus", &f.path("corpus.txt"),
            "--steps", "5", "--seq-len", "32", "--batch-tokens", "256", "--out", &f.path("lens"),
        ]);
        f
    }

    /// Argument lists for every analysis subcommand, writing under `out`.
    pub fn analysis_commands(&self, out: &Path) -> Vec<(String, Vec<String>)> {
        let model = self.path("model/model.tlns");
        let lens = self.path("lens/lens.tlns");
        let corpus = self.path("corpus.txt");
        let sentiment = self.path("sentiment.jsonl");
        let facts = self.path("facts.jsonl");
        let checkpoints = self.path("model/checkpoints");
        let bases = out.join("cbe/bases.tlns").display().to_string();
        let specs: Vec<(&str, Vec<&str>)> = vec![
            ("train-model", vec!["--corpus", &corpus, "--config", "tiny", "--steps", "6", "--batch-size", "2", "--seq-len", "16", "--checkpoint-every", "3"]),
            ("train-lens", vec!["--model", &model, "--corpus", &corpus, "--steps", "3", "--seq-len", "16", "--batch-tokens", "64"]),
            ("eval-lens", vec!["--model", &model, "--corpus", &corpus, "--lens", &lens, "--seq-len", "32"]),
            ("bias", vec!["--model", &model, "--corpus", &corpus, "--variant", "plain", "--layers", "0-1,3", "--seq-len", "32"]),
            ("transfer", vec!["--model", &model, "--lens", &lens, "--corpus", &corpus, "--seq-len", "32"]),
            ("covdrift", vec!["--model", &model, "--corpus", &corpus, "--k", "1", "--seq-len", "32"]),
            ("cbe", vec!["--model", &model, "--lens", &lens, "--corpus", &corpus, "--layers", "1,2", "--k", "3", "--max-iter", "20", "--n-seqs", "3", "--seq-len", "16"]),
            ("fidelity", vec!["--model", &model, "--bases", &bases, "--corpus", &corpus, "--n-seqs", "3", "--seq-len", "16"]),
            ("align", vec!["--model", &model, "--lens", &lens, "--bases", &bases, "--corpus", &corpus, "--k", "2", "--n-seqs", "3", "--seq-len", "16"]),
            ("inject-eval", vec!["--model", &model, "--lens", &lens, "--task", &sentiment, "--splits", "2", "--bootstrap", "100"]),
            ("sweep-accuracy", vec!["--model", &model, "--lens", &lens, "--task", &sentiment, "--demos", "correct", "--calibration", "median"]),
            ("depth", vec!["--checkpoints", &checkpoints, "--lens", &lens, "--task", &facts]),
            ("diagnostics", vec!["--model", &model, "--corpus", &corpus, "--seq-len", "16", "--dim", "4096", "--n", "20"]),
            ("staticlens", vec!["--model", &model, "--lens", &lens, "--layers", "0", "--k", "4", "--shuffles", "2"]),
            ("heatmap", vec!["--model", &model, "--lens", &lens, "--text", "Review: fine"]),
        ];
        specs
            .into_iter()
            .map(|(cmd, args)| {
                let mut all: Vec<String> = vec![cmd.to_string()];
                all.extend(args.into_iter().map(String::from));
                all.extend(["--out".into(), out.join(cmd).display().to_string(), "--seed".into(), "7".into()]);
                (cmd.to_string(), all)
            })
            .collect()
    }
}

/// Relative path to contents of every file under `root`.
/// Relative path to contents. Manifests record input paths, and some inputs
/// sit under `root` itself, so `root` is replaced by a placeholder there.
pub fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let prefix = root.display().to_string();
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut bytes = fs::read(&p).unwrap();
                if p.ends_with("manifest.json") {
                    bytes = String::from_utf8(bytes).unwrap().replace(&prefix, "<root>").into_bytes();
                }
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}
