//! Projects each contact hand's offset vector and picks the nearest object
//! as its active object.
//!
//! ```bash
//! cargo run -p ehoi --example matching_demo
//! ```

use ehoi::annotations::{derive_offset, BBox, ContactState, GloveStatus, OffsetVector};
use ehoi::matching::{match_hands, HandCandidate, MatchConfig, ObjectCandidate};

fn main() {
    let (w, h) = (640.0, 480.0);
    let objects = vec![
        ObjectCandidate { id: 10, bbox: BBox::new(60.0, 300.0, 140.0, 380.0) },
        ObjectCandidate { id: 11, bbox: BBox::new(420.0, 80.0, 520.0, 160.0) },
        ObjectCandidate { id: 12, bbox: BBox::new(300.0, 350.0, 360.0, 420.0) },
    ];
    let left = BBox::new(120.0, 200.0, 220.0, 300.0);
    let right = BBox::new(380.0, 180.0, 480.0, 280.0);
    let hands = vec![
        HandCandidate {
            id: 1,
            bbox: left,
            contact: ContactState::Contact,
            glove: GloveStatus::Glove,
            offset: derive_offset(&left, &objects[0].bbox, w, h),
        },
        HandCandidate {
            id: 2,
            bbox: right,
            contact: ContactState::Contact,
            glove: GloveStatus::NoGlove,
            offset: OffsetVector::normalized(0.6, 0.8, 0.2),
        },
        HandCandidate {
            id: 3,
            bbox: BBox::new(250.0, 100.0, 330.0, 180.0),
            contact: ContactState::NoContact,
            glove: GloveStatus::Glove,
            offset: OffsetVector::normalized(0.0, 1.0, 0.1),
        },
    ];
    let out = match_hands(&hands, &objects, w, h, &MatchConfig { max_distance: Some(150.0) });
    for r in out.records(&hands, &objects) {
        println!(
            "hand {} {:?} {:?} -> object {:?} via ({:.1}, {:.1})",
            r.hand_id, r.contact, r.glove, r.object_id, r.interaction_point[0], r.interaction_point[1]
        );
    }
    for warning in &out.warnings {
        println!("warning: {warning:?}");
    }
}
