use super::grid::{Action, Cell, GridState};

/// Greedy Manhattan move toward the goal: larger gap first, ties horizontal.
///
/// On corridor layouts the expert first heads for the cell left of the door,
/// then steps through it.
pub fn scripted_expert_action(s: &GridState) -> Action {
    match s.door {
        Some((door_row, wc)) if s.agent.1 < wc => {
            let approach = (door_row, wc - 1);
            if s.agent == approach {
                Action::Right
            } else {
                greedy(s.agent, approach)
            }
        }
        Some((_, wc)) if s.agent.1 == wc => Action::Right,
        _ => greedy(s.agent, s.goal),
    }
}

fn greedy(agent: Cell, target: Cell) -> Action {
    let dr = target.0 as isize - agent.0 as isize;
    let dc = target.1 as isize - agent.1 as isize;
    if dr == 0 && dc == 0 {
        Action::Stay
    } else if dc.abs() >= dr.abs() {
        if dc > 0 {
            Action::Right
        } else {
            Action::Left
        }
    } else if dr > 0 {
        Action::Down
    } else {
        Action::Up
    }
}
