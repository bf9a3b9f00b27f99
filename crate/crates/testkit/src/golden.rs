//! The fixed five-tip retrieval result behind the guidelines golden file.

use tmem_core::clock::Timestamp;
use tmem_core::embed::{Embedder, HashEmbedder};
use tmem_core::model::{Granularity, Priority, Tip, TipCategory};
use tmem_core::retrieval::{RetrievalResult, RetrievedTip, StrategyUsed};

pub const GUIDELINES_GOLDEN: &str = "guidelines_5tips.txt";

struct Spec {
    id: &'static str,
    category: TipCategory,
    priority: Priority,
    content: &'static str,
    trigger: &'static str,
    steps: &'static [&'static str],
    negative: Option<&'static str>,
    context: Option<&'static str>,
    index: &'static str,
    score: f64,
}

const SPECS: [Spec; 5] = [
    Spec {
        id: "golden-1",
        category: TipCategory::Recovery,
        priority: Priority::High,
        content: "When a login attempt fails with \"invalid credentials,\" verify you are using the correct app-specific password by re-calling supervisor.show_account_passwords() and filtering by the target app name.",
        trigger: "Authentication fails on any app after an initial login attempt.",
        steps: &["Re-retrieve credentials from supervisor", "Filter for the specific app name (exact match)", "Retry login with the correct credentials"],
        negative: None,
        context: None,
        index: "Authenticate with service",
        score: 0.91,
    },
    Spec {
        id: "golden-2",
        category: TipCategory::Strategy,
        priority: Priority::High,
        content: "When performing checkout operations, systematically verify all prerequisites (cart contents, shipping address, payment method) before initiating the checkout sequence.",
        trigger: "When task involves checkout, purchase, or payment operations",
        steps: &[
            "Call get_cart_items() to verify cart is not empty",
            "Call get_shipping_address() to verify address is configured",
            "Call get_payment_methods() to verify payment method exists",
            "Only proceed with checkout if all prerequisites are satisfied",
        ],
        negative: None,
        context: Some("amazon"),
        index: "Buy the items in my Amazon cart with my saved card",
        score: 0.84,
    },
    Spec {
        id: "golden-3",
        category: TipCategory::Optimization,
        priority: Priority::Medium,
        content: "When emptying a shopping cart with multiple items, use empty_cart() instead of iterating remove_from_cart(item_id) for each item.",
        trigger: "When task requires removing all items from cart",
        steps: &["Check if cart has multiple items to remove", "Instead of looping remove_from_cart(), call empty_cart() once", "Verify cart is empty with get_cart_items()"],
        negative: Some("Do not use for i in items: remove_from_cart(i) when emptying the entire cart."),
        context: Some("amazon"),
        index: "Empty my Amazon shopping cart",
        score: 0.77,
    },
    Spec {
        id: "golden-4",
        category: TipCategory::Recovery,
        priority: Priority::Critical,
        content: "When checkout fails with 'payment method required' error, verify payment configuration and add payment method if missing before retrying.",
        trigger: "When checkout or payment operations fail",
        steps: &[
            "Recognize error message indicating missing payment method",
            "Call get_payment_methods() to check current configuration",
            "If empty, call add_payment_method() with appropriate details",
            "Retry the checkout operation",
        ],
        negative: Some("Do not simply retry without addressing the missing payment method."),
        context: Some("amazon"),
        index: "Check out my Amazon cart and place the order",
        score: 0.7,
    },
    Spec {
        id: "golden-5",
        category: TipCategory::Strategy,
        priority: Priority::Low,
        content: "Use paginated retrieval when fetching large result sets.",
        trigger: "When a listing API accepts a page index",
        steps: &[],
        negative: None,
        context: None,
        index: "Retrieve service data",
        score: 0.6123,
    },
];

/// Five tips covering every category, four priorities, and the optional
/// `Steps:` and `Avoid:` lines.
pub fn five_tip_result() -> RetrievalResult {
    let embedder = HashEmbedder::default();
    let tips = SPECS
        .iter()
        .map(|s| RetrievedTip {
            tip: Tip {
                id: s.id.into(),
                category: s.category,
                content: s.content.into(),
                purpose: "Keeps the agent on the path that worked before.".into(),
                steps: s.steps.iter().map(|x| x.to_string()).collect(),
                trigger: s.trigger.into(),
                negative_example: s.negative.map(Into::into),
                application_context: s.context.map(Into::into),
                task_category: None,
                priority: s.priority,
                granularity: Granularity::Task,
                subtask_description: None,
                generalized_description: None,
                index_description: s.index.into(),
                source_trajectory_ids: vec!["golden-source".into()],
                source_outcome: "recovery_success".into(),
                embedding: embedder.embed(s.index).expect("non-empty text"),
                created_at: Timestamp::from_unix(crate::fixtures::FIXED_CLOCK_SECS),
            },
            score: s.score,
            matched_description: s.index.into(),
        })
        .collect();
    RetrievalResult {
        tips,
        strategy_used: StrategyUsed::Cosine,
        query_text: "Log in to Spotify and list my playlists".into(),
        selection: None,
        warnings: vec![],
    }
}
