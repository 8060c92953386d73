use chatpainter::data_synth::{Cell, Color, Dialogue, ObjectSpec, SceneSpec, Shape, Size};

/// Reference inverse of the caption and dialogue templates, written against
/// the text alone.
pub fn parse_scene(caption: &str, dialogue: &Dialogue, seed: u64) -> Option<SceneSpec> {
    let rest = caption.strip_prefix("a scene with ")?;
    let (count, rest) = rest.split_once(" objects, including a ")?;
    let count: usize = count.parse().ok()?;
    let (color, shape) = rest.split_once(' ')?;
    let mut colors = vec![Color::from_name(color)?];
    let mut shapes = vec![Shape::from_name(shape)?];
    let mut sizes = Vec::new();
    let mut cells = Vec::new();
    let mut background = None;
    let ordinal = |q: &str| -> Option<usize> {
        ["first", "second", "third"]
            .iter()
            .position(|o| q.contains(&format!(" {o} object")))
    };
    for t in dialogue.turns() {
        let q = t.question.as_str();
        let a = t.answer.as_str();
        if q == "what color is the background?" {
            background = Some(Color::from_name(a)?);
        } else if q.starts_with("what is the ") {
            let i = ordinal(q)?;
            let (c, s) = a.strip_prefix("a ")?.split_once(' ')?;
            if colors.len() != i || shapes.len() != i {
                return None;
            }
            colors.push(Color::from_name(c)?);
            shapes.push(Shape::from_name(s)?);
        } else if q.starts_with("how big is the ") {
            if sizes.len() != ordinal(q)? {
                return None;
            }
            sizes.push(match a {
                "small" => Size::Small,
                "large" => Size::Large,
                _ => return None,
            });
        } else if q.starts_with("where is the ") {
            if cells.len() != ordinal(q)? {
                return None;
            }
            let (row, col) = a.split_once(' ')?;
            let r = ["top", "middle", "bottom"].iter().position(|x| *x == row)?;
            let c = ["left", "center", "right"].iter().position(|x| *x == col)?;
            cells.push(Cell::new((3 * r + c) as u8).ok()?);
        } else if q == "is there anything else?" {
            if a != "no" {
                return None;
            }
        } else {
            return None;
        }
    }
    if [colors.len(), shapes.len(), sizes.len(), cells.len()] != [count; 4] {
        return None;
    }
    let objects = (0..count)
        .map(|i| ObjectSpec {
            shape: shapes[i],
            color: colors[i],
            size: sizes[i],
            cell: cells[i],
        })
        .collect();
    SceneSpec::new(background?, objects, seed).ok()
}
