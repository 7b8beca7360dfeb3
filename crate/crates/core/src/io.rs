//! Line-delimited scene serialization.
//!
//! A split file starts with a header record naming the exposed classes,
//! followed by one scene record per line. A task file starts with a header
//! listing the mode and the classes of each session, followed by one
//! `{"session": i, "scene": {...}}` record per line. Field order is fixed by
//! the struct definitions and every real is written with at most 9
//! significant digits.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClassId, DatasetSplit, Scene, TaskMode, TaskSequence};

/// Rounds to 9 significant digits.
pub fn sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Copy of `scene` with every real rounded by [`sig9`].
pub fn quantize_scene(scene: &Scene) -> Scene {
    let mut s = scene.clone();
    s.extent.width = sig9(s.extent.width);
    s.extent.height = sig9(s.extent.height);
    for inst in &mut s.instances {
        quantize_box(&mut inst.bbox);
        for v in &mut inst.latent_feature {
            *v = sig9(*v);
        }
    }
    for p in &mut s.proposals {
        quantize_box(&mut p.bbox);
        p.max_iou = sig9(p.max_iou);
    }
    s
}

fn quantize_box(b: &mut crate::model::BoundingBox) {
    b.x_min = sig9(b.x_min);
    b.y_min = sig9(b.y_min);
    b.x_max = sig9(b.x_max);
    b.y_max = sig9(b.y_max);
}

#[derive(Serialize, Deserialize)]
struct SplitHeader {
    kind: String,
    visible_classes: BTreeSet<ClassId>,
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    kind: String,
    mode: TaskMode,
    sessions: Vec<BTreeSet<ClassId>>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    session: usize,
    scene: Scene,
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_split<W: Write>(w: &mut W, split: &DatasetSplit) -> Result<()> {
    write_line(
        w,
        &SplitHeader {
            kind: "split".into(),
            visible_classes: split.visible_classes.clone(),
        },
    )?;
    for scene in &split.scenes {
        write_line(w, &quantize_scene(scene))?;
    }
    Ok(())
}

fn records<R: BufRead>(r: R) -> impl Iterator<Item = Result<String>> {
    r.lines()
        .map(|l| l.map_err(Error::from))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
}

pub fn read_split<R: BufRead>(r: R) -> Result<DatasetSplit> {
    let mut lines = records(r);
    let header: SplitHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Data("empty split file".into())),
    };
    if header.kind != "split" {
        return Err(Error::Data(format!("expected split header, got {}", header.kind)));
    }
    let mut scenes = Vec::new();
    for line in lines {
        let scene: Scene = serde_json::from_str(&line?)?;
        scenes.push(scene);
    }
    let split = DatasetSplit {
        visible_classes: header.visible_classes,
        scenes,
    };
    check_unique_ids(split.scenes.iter())?;
    Ok(split)
}

pub fn write_tasks<W: Write>(w: &mut W, tasks: &TaskSequence) -> Result<()> {
    write_line(
        w,
        &TaskHeader {
            kind: "tasks".into(),
            mode: tasks.mode,
            sessions: tasks
                .sessions
                .iter()
                .map(|s| s.visible_classes.clone())
                .collect(),
        },
    )?;
    for (session, split) in tasks.sessions.iter().enumerate() {
        for scene in &split.scenes {
            write_line(
                w,
                &TaskRecord {
                    session,
                    scene: quantize_scene(scene),
                },
            )?;
        }
    }
    Ok(())
}

pub fn read_tasks<R: BufRead>(r: R) -> Result<TaskSequence> {
    let mut lines = records(r);
    let header: TaskHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return Err(Error::Data("empty task file".into())),
    };
    if header.kind != "tasks" {
        return Err(Error::Data(format!("expected tasks header, got {}", header.kind)));
    }
    let mut sessions: Vec<DatasetSplit> = header
        .sessions
        .into_iter()
        .map(|visible_classes| DatasetSplit {
            visible_classes,
            scenes: Vec::new(),
        })
        .collect();
    for line in lines {
        let rec: TaskRecord = serde_json::from_str(&line?)?;
        let n = sessions.len();
        sessions
            .get_mut(rec.session)
            .ok_or_else(|| Error::Data(format!("session {} out of range ({n})", rec.session)))?
            .scenes
            .push(rec.scene);
    }
    check_unique_ids(sessions.iter().flat_map(|s| &s.scenes))?;
    Ok(TaskSequence {
        mode: header.mode,
        sessions,
    })
}

fn check_unique_ids<'a>(scenes: impl Iterator<Item = &'a Scene>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for s in scenes {
        if !seen.insert(s.scene_id) {
            return Err(Error::Data(format!("duplicate scene id {}", s.scene_id)));
        }
    }
    Ok(())
}
