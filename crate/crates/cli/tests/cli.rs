use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cognisim::backends::ScriptedChat;
use cognisim::fixtures;
use cognisim::session::{run_session, ClockMode, SessionConfig};
use cognisim::transcript::persist_record;

fn cognisim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cognisim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn seeded() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let o = cognisim(&["run", "--seed-fixtures", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = dir.path().join("experiment.toml");
    (dir, config)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn seeded_run_and_report() {
    let (dir, config) = seeded();
    let o = cognisim(&["run", "--config", s(&config), "--preset", "easy"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let transcripts = out.join("scripted-therapist/easy/transcripts");
    assert_eq!(std::fs::read_dir(transcripts).unwrap().count(), 4);
    assert!(!out.join("scripted-therapist/hard").exists());

    let text = cognisim(&["report", s(&out)]);
    assert!(text.status.success());
    assert!(stdout(&text).contains("100.00 100.00 100.00"), "{}", stdout(&text));

    let csv = stdout(&cognisim(&["report", s(&out), "--format", "csv"]));
    assert!(csv.lines().any(|l| l == "therapist,preset,E,I,G"));
    assert!(csv.lines().any(|l| l.ends_with("Avg.,RH,CB,IB,CS")));
    assert!(csv.contains("scripted-therapist,easy,100.00,100.00,100.00"));

    let json = stdout(&cognisim(&["report", s(&out), "--format", "json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["easy"][0]["cder"][2], 100.0);
}

#[test]
fn two_presets_give_two_sections() {
    let (dir, config) = seeded();
    assert!(cognisim(&["run", "--config", s(&config)]).status.success());
    let text = stdout(&cognisim(&["report", s(&dir.path().join("out"))]));
    assert_eq!(text.matches("== ").count(), 2);
    let csv = stdout(&cognisim(&["report", s(&dir.path().join("out")), "--format", "csv"]));
    assert_eq!(csv.matches("# preset ").count(), 2);
}

#[test]
fn parallelism_does_not_change_outputs() {
    let (dir, config) = seeded();
    let a = dir.path().join("p1");
    let b = dir.path().join("p8");
    for (out, n) in [(&a, "1"), (&b, "8")] {
        let o = cognisim(&["run", "--config", s(&config), "--out", s(out), "--parallelism", n]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let ra = stdout(&cognisim(&["report", s(&a), "--format", "json"]));
    let rb = stdout(&cognisim(&["report", s(&b), "--format", "json"]));
    assert_eq!(ra, rb);
    for cell in ["easy", "hard"] {
        let rel = format!("scripted-therapist/{cell}/metrics.json");
        assert_eq!(std::fs::read(a.join(&rel)).unwrap(), std::fs::read(b.join(&rel)).unwrap());
    }
}

#[test]
fn missing_credentials_exit_2() {
    let (dir, config) = seeded();
    let text = std::fs::read_to_string(&config).unwrap().replace(
        "[therapist]\nkind = \"scripted_chat\"\nlabel = \"scripted-therapist\"\nscript_file = \"scripts/therapist.json\"",
        "[therapist]\nkind = \"remote_chat\"\nendpoint = \"https://example.invalid/v1/chat/completions\"\ncredentials_ref = \"COGNISIM_CLI_TEST_UNSET\"",
    );
    std::fs::write(&config, text).unwrap();
    let o = cognisim(&["run", "--config", s(&config)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("COGNISIM_CLI_TEST_UNSET"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "presets = [\"medium\"]\n").unwrap();
    assert_eq!(cognisim(&["run", "--config", s(&config)]).status.code(), Some(2));
    assert_eq!(cognisim(&["run", "--config", s(&dir.path().join("absent.toml"))]).status.code(), Some(2));
}

#[test]
fn aborted_session_still_writes_outputs() {
    let (dir, config) = seeded();
    // Four client lines: every session runs out before the therapist says goodbye.
    let client: Vec<String> = (1..=4).map(|i| format!("short reply {i}")).collect();
    std::fs::write(dir.path().join("scripts/client.json"), serde_json::to_string(&client).unwrap()).unwrap();
    let o = cognisim(&["run", "--config", s(&config), "--preset", "easy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("aborted"), "{}", stderr(&o));
    let transcripts = dir.path().join("out/scripted-therapist/easy/transcripts");
    assert_eq!(std::fs::read_dir(&transcripts).unwrap().count(), 4);
    let replay = cognisim(&["replay", s(&transcripts.join("alex__1.jsonl"))]);
    assert!(stdout(&replay).contains("termination aborted"), "{}", stdout(&replay));
}

#[test]
fn persona_failure_exit_1() {
    let (dir, config) = seeded();
    let two = serde_json::from_str::<serde_json::Value>(&fixtures::sample_persona_json())
        .map(|mut v| {
            v["experiences"].as_array_mut().unwrap().pop();
            v.to_string()
        })
        .unwrap();
    std::fs::write(dir.path().join("personas/short.json"), two).unwrap();
    let o = cognisim(&["run", "--config", s(&config), "--preset", "easy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("short.json"));
    let transcripts = dir.path().join("out/scripted-therapist/easy/transcripts");
    assert_eq!(std::fs::read_dir(transcripts).unwrap().count(), 4);
}

#[test]
fn validate_reports_per_file() {
    let (dir, _) = seeded();
    let personas = dir.path().join("personas");
    let o = cognisim(&["validate", s(&personas)]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS alex.json"));

    let mut v: serde_json::Value = serde_json::from_str(&fixtures::sample_persona_json()).unwrap();
    v["experiences"].as_array_mut().unwrap().pop();
    std::fs::write(personas.join("two.json"), v.to_string()).unwrap();
    let sentinel = fixtures::second_persona_json().replacen("\"reason\": \"", "\"reason\": \"unknown ", 1);
    assert_ne!(sentinel, fixtures::second_persona_json());
    std::fs::write(personas.join("sentinel.json"), sentinel).unwrap();

    let o = cognisim(&["validate", s(&personas)]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("FAIL two.json: experiences: expected 3"), "{text}");
    assert!(text.contains("FAIL sentinel.json"), "{text}");
    assert!(text.contains("unknown"), "{text}");
    assert!(text.contains("PASS maya.json"));
}

#[test]
fn replay_easy_pass_and_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures::easy_pass();
    let mut config = SessionConfig::new(f.preset);
    config.clock = ClockMode::Logical;
    let record = run_session(
        &fixtures::alex(),
        &ScriptedChat::new(f.therapist),
        &ScriptedChat::new(f.client),
        &ScriptedChat::new(f.judge),
        &config,
    )
    .unwrap();
    let path = dir.path().join("easy-pass.jsonl");
    persist_record(&record, &path).unwrap();

    let o = cognisim(&["replay", s(&path)]);
    assert_eq!(o.status.code(), Some(0));
    let dump = stdout(&o);
    assert!(dump.contains("[turn 1] * unmask_internal"), "{dump}");
    assert!(dump.contains("Consistency: ok"));

    let tampered: String = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"unmask_internal\""))
        .map(|l| format!("{l}\n"))
        .collect();
    let bad = dir.path().join("tampered.jsonl");
    std::fs::write(&bad, tampered).unwrap();
    let o = cognisim(&["replay", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("VIOLATION"), "{}", stdout(&o));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = cognisim(&["replay", s(&empty)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = cognisim(&["report", s(dir.path())]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no batch outputs"));
}

#[test]
fn dry_run_calls_nothing() {
    let (dir, config) = seeded();
    let o = cognisim(&["run", "--config", s(&config), "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.matches("--- therapist prompt ---").count(), 4);
    assert!(text.contains("Reason for counseling"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn calibrate_with_scripted_judge() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, name) in [("high", "a.txt"), ("high", "b.txt"), ("low", "c.txt")] {
        std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        std::fs::write(dir.path().join(sub).join(name), "Therapist: Hello.\nClient: Hi.\n").unwrap();
    }
    let script = dir.path().join("judge.json");
    let lines = ["Rating: 4", "Rating: 4", "Rating: 3", "Rating: 4", "Rating: 2", "Rating: 1"];
    std::fs::write(&script, serde_json::to_string(&lines).unwrap()).unwrap();
    let o = cognisim(&["calibrate", s(dir.path()), "--judge-script", s(&script)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["high"]["script_eval_mean"], 3.5);
    assert_eq!(v["pass"], true);
}
