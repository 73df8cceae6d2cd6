//! Synthetic personas and scripted sessions used by tests, examples and
//! `cognisim run --seed-fixtures`.

use std::path::Path;

use serde_json::json;

use crate::persona::{load_profile, ClientProfile, DifficultyPreset};

pub fn sample_persona_json() -> String {
    serde_json::to_string_pretty(&json!({
        "name": "Alex",
        "traits": ["plain", "verbose", "go off on tangents", "hostile", "guarded"],
        "openness": "low",
        "metacognition": "low",
        "intake": {
            "age": 34,
            "job": "Warehouse supervisor",
            "reason": "Feels anxious and on edge about an upcoming family event and wants help coping."
        },
        "internal": {
            "relevant_histories": [
                "The patient has a history of substance abuse and has been through rehab to overcome it.",
                "He has had issues with his family, particularly with his mother, where he has felt rejected and emotionally neglected."
            ],
            "core_beliefs": ["I am trapped.", "I am out of control."],
            "intermediate_beliefs": [
                "I'm just not very good at handling stress and I have poor self-control, which is why I need to not put myself in stressful situations.",
                "There's nothing I can do to change my situation. I cannot control myself."
            ],
            "coping_strategies": [
                "Distancing himself from his family to reduce exposure to negativity and conflict.",
                "Letting calls and messages go unanswered when contact feels threatening."
            ]
        },
        "experiences": [
            {
                "situation": "Alex's cousin invited him to attend his upcoming wedding.",
                "automatic_thought": "It will be stressful and negative; people will ask me questions I cannot answer or don't want to answer; my mum would be ashamed of me and critical of me as always; They don't want me there anyway, nobody likes me in this family.",
                "emotion": "anxious, worried, fearful, scared, tense",
                "behavior": "Ignored the invitation and did not respond to the RSVP request. Ignored phone calls from family."
            },
            {
                "situation": "I missed my alarm and woke up late for work.",
                "automatic_thought": "My whole day is written off now, I might as well not do anything.",
                "emotion": "Angry, mad, irritated, annoyed",
                "behavior": "Called in sick. Got drunk in the morning and had a fight with girlfriend."
            },
            {
                "situation": "His recovery sponsor asked him to share his story at a group meeting.",
                "automatic_thought": "Everyone will see how weak I am and judge me for what I did.",
                "emotion": "nervous, ashamed, embarrassed",
                "behavior": "Said he was busy, skipped the meeting and stayed home alone all evening."
            }
        ]
    }))
    .expect("literal serializes")
}

pub fn second_persona_json() -> String {
    serde_json::to_string_pretty(&json!({
        "name": "Maya",
        "traits": ["articulate", "self-critical", "eager to please"],
        "openness": "high",
        "metacognition": "high",
        "intake": {
            "age": 27,
            "reason": "Struggling with constant worry about her performance at a new job."
        },
        "internal": {
            "relevant_histories": [
                "She grew up with a parent who praised her only when she brought home top grades."
            ],
            "core_beliefs": ["I am incompetent."],
            "intermediate_beliefs": [
                "If I make a single mistake, people will realise I don't deserve my position."
            ],
            "coping_strategies": [
                "Working late every night and re-checking every task several times."
            ]
        },
        "experiences": [
            {
                "situation": "Her manager scheduled a short meeting without giving a reason.",
                "automatic_thought": "They found out I'm not good enough and I'm going to be let go.",
                "emotion": "panicky, dread, nauseous",
                "behavior": "Spent the morning re-reading old reports looking for errors."
            },
            {
                "situation": "A colleague pointed out a typo in her presentation slides.",
                "automatic_thought": "Now the whole team thinks I'm careless.",
                "emotion": "embarrassed, ashamed",
                "behavior": "Apologised repeatedly and stayed late to redo the whole deck."
            },
            {
                "situation": "Her friends invited her away for a weekend trip.",
                "automatic_thought": "If I take time off I'll fall behind and everyone will notice.",
                "emotion": "guilty, torn, tense",
                "behavior": "Declined the trip and worked through the weekend."
            }
        ]
    }))
    .expect("literal serializes")
}

pub fn alex() -> ClientProfile {
    load_profile(&sample_persona_json()).expect("fixture persona is valid")
}

pub fn maya() -> ClientProfile {
    load_profile(&second_persona_json()).expect("fixture persona is valid")
}

/// One fully scripted session: lines for each backend and the preset that
/// gives them their meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedFixture {
    pub name: &'static str,
    pub preset: DifficultyPreset,
    pub therapist: Vec<String>,
    pub client: Vec<String>,
    pub judge: Vec<String>,
}

fn lines(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Easy preset. The exploration judge scores 5 at turn 1, so the internal
/// diagram opens on the first exchange; the therapist says goodbye at the
/// start of turn 5.
pub fn easy_pass() -> ScriptedFixture {
    ScriptedFixture {
        name: "easy-pass",
        preset: DifficultyPreset::easy(),
        therapist: lines(&[
            "Hi Alex, it's nice to meet you. How can I assist you today?",
            "That sounds like a lot to carry. When you picture the wedding, what goes through your mind first?",
            "You mentioned your family a few times. What was it like growing up around them?",
            "When things feel this heavy, what do you usually do to get through the day?",
            "Thank you for sharing so openly today, Alex. Let's pick this up next week. Goodbye, and take care.",
        ]),
        client: lines(&[
            "Hi. Um, I guess I'm just here because... well, I don't really know. There's this wedding coming up and I can't stop thinking about it.",
            "Mostly that everybody will be staring at me and asking stuff I don't want to answer. My mum will make that face she always makes.",
            "Honestly it was rough. I always felt like the one nobody wanted around, and after rehab it only got worse.",
            "I just keep away from them. If I don't pick up the phone, nobody can have a go at me.",
        ]),
        judge: lines(&[
            "[Rating]: 5\n[Justification]: The question about the wedding led the client to name the fear behind his avoidance.",
            "[Rating]: 4\n[Justification]: The therapist invited reflection on family history.",
            "[Rating]: 4\n[Justification]: The client connected his past to present feelings.",
            "Rating: 4\nKey Examples:\n- \"I just keep away from them.\"\nProgression: the client is sharing more freely.",
            "[Rating]: 4\n[Justification]: The client described his coping pattern in his own words.",
        ]),
    }
}

/// Hard preset with every judgment at 3: nothing is ever unmasked and the
/// session runs to the 15-turn cap.
pub fn hard_stonewall() -> ScriptedFixture {
    let therapist = (1..=15)
        .map(|t| match t {
            1 => "Hi Alex, it's nice to meet you. How can I assist you today?".to_string(),
            t => format!("I hear you. Can you tell me a little more about that? ({t})"),
        })
        .collect();
    let client = (1..=15)
        .map(|t| match t {
            1 => "Hi. I don't usually talk about stuff like this.".to_string(),
            t => format!("I don't know. It's fine, I guess. ({t})"),
        })
        .collect();
    let mut judge = Vec::new();
    // Checks in schedule order: exploration at 3, 6, 9, 12, 15 and rapport at
    // 4, 8, 12, with rapport first when both fall on the same turn.
    for turn in 1..=15u32 {
        if turn % 4 == 0 {
            judge.push(format!(
                "Rating: 3\nKey Examples:\n- short answers\nProgression: still guarded at turn {turn}."
            ));
        }
        if turn % 3 == 0 {
            judge.push(format!(
                "[Rating]: 3\n[Justification]: Surface-level prompts at turn {turn}."
            ));
        }
    }
    ScriptedFixture {
        name: "hard-stonewall",
        preset: DifficultyPreset::hard(),
        therapist,
        client,
        judge,
    }
}

/// Lines consumed by the scripted extractor: one JSON object per session.
pub fn extractor_script() -> Vec<String> {
    vec![json!({
        "relevant_history": null,
        "core_belief": "I am out of control",
        "intermediate_belief": null,
        "coping_strategy": "Staying away from family so nobody can criticise him."
    })
    .to_string()]
}

/// Therapist, client and judge lines used by the seeded batch: ten turns
/// with the tenth therapist line saying goodbye.
pub fn batch_scripts() -> (Vec<String>, Vec<String>, Vec<String>) {
    let therapist: Vec<String> = (1..=10)
        .map(|t| match t {
            1 => "Hello, and welcome. What brings you in today?".to_string(),
            10 => "We're at time for today. Thank you for your openness. Goodbye for now.".to_string(),
            t => format!("What was that like for you? Tell me more. ({t})"),
        })
        .collect();
    let client: Vec<String> = (1..=9)
        .map(|t| format!("It's been hard to put into words, but I'm trying. ({t})"))
        .collect();
    let scores = [3, 4, 2, 5, 4, 3, 5, 4, 4, 3, 5];
    let judge = scores
        .iter()
        .enumerate()
        .map(|(i, s)| {
            if i % 2 == 0 {
                format!("[Rating]: {s}\n[Justification]: check {}", i + 1)
            } else {
                format!("Rating: {s}\nProgression: check {}", i + 1)
            }
        })
        .collect();
    (therapist, client, judge)
}

/// One annotator answer per therapist utterance of [`batch_scripts`].
pub fn annotator_script() -> Vec<String> {
    lines(&[
        "Questions on Experiences",
        "Questions on Emotions",
        "Reflections on Emotions",
        "Questions on Perspectives",
        "Reflections on Needs",
        "Normalizing",
        "Reflections on Strengths",
        "Solutions: Planning",
        "Psychoeducation",
        "Normalizing",
    ])
}

pub fn ctrs_script() -> Vec<String> {
    lines(&[
        "4, the therapist reflected the client's feelings accurately",
        "5, warm and genuine throughout",
        "6, the therapist encouraged the patient to take an active role",
        "3, mostly asked rather than guided",
        "4, touched on the core worry",
        "2, no concrete plan",
    ])
}

const SEEDED_CONFIG: &str = r#"# Offline batch over the seeded personas. Every backend is scripted or
# fixed, so repeated runs produce identical transcripts and reports.
personas_dir = "personas"
presets = ["easy", "hard"]
sessions_per_cell = 2
parallelism = 4
output_dir = "out"
idss_threshold = 0.85
max_turns = 15

[therapist]
kind = "scripted_chat"
label = "scripted-therapist"
script_file = "scripts/therapist.json"

[client]
kind = "scripted_chat"
script_file = "scripts/client.json"

[judge]
kind = "scripted_chat"
script_file = "scripts/judge.json"

[extractor]
kind = "scripted_chat"
script_file = "scripts/extractor.json"

[embedder]
kind = "fixed_embedding"
dimension = 256

[[embedder.table]]
left = "I am out of control."
right = "I am out of control"
cosine = 0.97

[annotator]
kind = "scripted_chat"
script_file = "scripts/annotator.json"

[ctrs_judge]
kind = "scripted_chat"
script_file = "scripts/ctrs.json"
"#;

/// Writes personas, scripts and an `experiment.toml` that runs them.
pub fn seed_fixtures(dir: &Path) -> std::io::Result<()> {
    let personas = dir.join("personas");
    let scripts = dir.join("scripts");
    std::fs::create_dir_all(&personas)?;
    std::fs::create_dir_all(&scripts)?;
    std::fs::write(personas.join("alex.json"), sample_persona_json())?;
    std::fs::write(personas.join("maya.json"), second_persona_json())?;
    let (therapist, client, judge) = batch_scripts();
    let write = |name: &str, lines: &[String]| {
        let text = serde_json::to_string_pretty(lines).expect("strings serialize");
        std::fs::write(scripts.join(name), text)
    };
    write("therapist.json", &therapist)?;
    write("client.json", &client)?;
    write("judge.json", &judge)?;
    write("extractor.json", &extractor_script())?;
    write("annotator.json", &annotator_script())?;
    write("ctrs.json", &ctrs_script())?;
    std::fs::write(dir.join("experiment.toml"), SEEDED_CONFIG)?;
    for fixture in [easy_pass(), hard_stonewall()] {
        let text = serde_json::to_string_pretty(&json!({
            "preset": fixture.preset.label,
            "therapist": fixture.therapist,
            "client": fixture.client,
            "judge": fixture.judge,
        }))
        .expect("fixture serializes");
        std::fs::write(scripts.join(format!("{}.json", fixture.name)), text)?;
    }
    Ok(())
}
