//! Prompt catalog. Each template is a fixed text with `{Placeholder}` slots
//! filled in a single pass by [`crate::text::fill_template`].
//!
//! `term_extraction`, `term_explanation`, `pattern_consolidation`,
//! `initial_analysis` and `claim_classification` are local additions; the
//! remaining templates reproduce the production prompts and their output
//! grammars.

use crate::gateway::TemplateId;
use crate::text::fill_template;

pub const CONCEPT_SCORING: &str = "\
# Task Description
You are an expert evaluator assessing a risk management apprentice's understanding of a given concept. Your task is to compare the apprentice's description against the ground truth and assign a score from 1 to 5 based on semantic similarity and conceptual completeness. Output only the numerical score (1-5) without explanations.

# Evaluation Criteria
- Completely Unfamiliar (1): No meaningful overlap with the ground truth. Key elements are missing or fundamentally incorrect.
- Slightly Familiar (2): Minimal alignment. Mentions some related terms but lacks critical details or contains significant inaccuracies.
- Partially Mastered (3): Covers some key aspects but omits others or includes minor errors. Partial semantic alignment.
- Mastered (4): Accurately explains most key components with high semantic similarity. Minor omissions or phrasing differences.
- Fully Mastered (5): Matches all critical elements of the ground truth. No omissions, errors, or semantic deviations.

# Instructions
1. Identify key components of the ground truth (e.g., definitions, processes, risks, mitigations).
2. Check if the apprentice's description includes these components accurately and completely.
3. Deduct points for missing elements, inaccuracies, or irrelevant additions.
4. Prioritize semantic equivalence over exact wording.

# Output Format
A single integer (1-5)

# Input Data
- concept: {Concept}
- ground truth explanation: {Explanation}
- apprentice's answer: {Answer}
";

pub const SCENARIO_KNOWLEDGE: &str = "\
# Task Description
You are a risk management analyst tasked with identifying scenario-specific characteristics and potential risk misjudgments.

# Instructions
1. Extract Key Characteristics: Analyze the provided business scenario and documents to list its unique features (e.g., user behavior patterns, transaction types, regulatory constraints).
2. Anticipate Misjudged Risk Patterns:
  - Identify existing \"misjudgments\" (initially taken as risk pattern but later dispelled doubts) in the documents
  - Infer potential misjudgments by cross-referencing scenario traits with common risk frameworks

# Output Format
Characteristics:
- [Feature 1]: [Brief explanation]
- [Feature 2]: [Brief explanation]
...
Risk Pattern Misjudgments:
- [Existing/Potential Misjudgment 1]: [Reason + Impact]
- [Existing/Potential Misjudgment 2]: [Reason + Impact]
...

# Input
- business scenario: {Scenario}
- documents: {Documents}
";

pub const RISK_PATTERN_EXTRACTION: &str = "\
# Task Description
You are a risk management code analyzer. Your task is to extract risk patterns from two code snippets:
  - Risk Feature Calculation Code: Identifies how risk-related features are computed.
  - Risk Discrimination Model Code: Defines rules or models that classify risks based on the calculated features.

# Analysis Steps
1. Parse Feature Calculations:
  - Identify variables representing risk features (e.g., transaction_count, avg_amount).
  - Note any preprocessing, thresholds, or transformations applied to these features.
2. Extract Discrimination Logic:
  - Analyze conditional statements (e.g., if clauses, loops) in the model code.
  - Focus on logical connectors: Flag AND/OR conditions that combine multiple features (e.g., if (A > X AND B < Y)).
  - Map how features interact within these logical groupings.
3. Synthesize Risk Patterns:
  - Group conditions linked by AND into a single coherent pattern if possible (e.g., \"High risk if both A and B are true\").
  - Treat OR as separate patterns unless they share a common theme (e.g., \"Underage user OR unverified email\").
  - Describe patterns concisely, emphasizing thresholds and feature relationships.

# Output Format
A JSON array of objects with name and desc fields.
[
    {
        \"name\": \"Short, descriptive title for the risk pattern(e.g., \\\"High-Frequency Low-Value Transactions\\\")\",
        \"desc\": \"Brief explanation of the logic, including thresholds and feature interactions(e.g., \\\"Triggers if transaction count > 20/week AND average amount < 50\\\").\"
    },
    ...
]

# Rules
1. Ignore dummy comments, variable names, and non-conditional code structures.
2. Avoid technical jargon; use plain language in descriptions.
3. If multiple AND/OR conditions exist, split them into distinct patterns unless logically cohesive.

# Input
- Risk Feature Calculation Code: {Feature Calculation Code}
- Risk Discrimination Model Code: {Discrimination Model Code}
";

pub const FACT_VERIFICATION: &str = "\
# Task Description
You are a fact-checking system that evaluates whether risk analysis conclusions align with the provided data.

# Input Data Explanation
- Data: Preprocessed into one of three formats:
  - Table-as-JSON: Key-value pairs (e.g., {\"user_age\": 45, \"transaction_count\": 10}).
  - Graph-as-Triples: Source-target-edge tuples (e.g., (User123, User456, id_card) denotes that User123 and User456 share the same id card).
  - Text: Unstructured context such as order reviews and chat records.
- Conclusions: A list of risk analysis claims to be checked

# Analysis Steps
1. Verify each conclusion against the input data (formatted as JSON from tables, triples from graph, or raw text).
2. Identify misjudgments caused by misinterpretations of the data (e.g., field ambiguity, relationship direction errors).
3. Output decisions to retain valid analysis or discard those stemming from data misunderstandings.

# Output Format
A JSON array of objects with claim, decision and reason fields.
[
    {
        \"claim\": \"[original claim]\",
        \"decision\": \"retain\" | \"discard\",
        \"reason\": \"Explain why the claim is retained/discarded\"
    },
    ...
]

# Input
- provided data: {Data}
- original claims: {Claims}
";

pub const KNOWLEDGE_CHECK: &str = "\
# Task Description
You are a risk assessment system tasked with filtering a list of risk claims by cross-referencing business logic and risk pattern knowledge. Your task is to retain high-confidence claims that align with both sources.

# Analysis Steps
1. Knowledge Extraction:
  - Business Logic Parsing: Identify and extract domain-specific business rules that define acceptable (whitelisted) risk patterns; Summarize key risk patterns explicitly permitted by the business logic.
  - Risk Pattern Analysis: Extract explicit risk thresholds, rules, or criteria from the provided risk pattern knowledge; Identify additional risk patterns semantically or contextually related to the current risk descriptions.
2. Claim Validation:
  - Whitelist Filtering: For each claim, determine if it matches any whitelisted risk pattern. If matched, flag for discarding.
  - Risk Threshold Evaluation: Assess whether the claim meets or exceeds predefined risk thresholds (e.g., severity, likelihood). Retain if it qualifies.
  - Contextual Risk Correlation: Check if the claim implicitly relates to unaddressed risk patterns that were not explicitly stated but are relevant based on domain knowledge. If any, add it to the claims.

# Output Format
A JSON array of objects with claim, decision and reason fields.
[
    {
        \"claim\": \"[original claim] / [newly added claim]\",
        \"decision\": \"retain\" | \"discard\" | \"added\",
        \"reason\": \"Explain why the claim is retained/discarded/added\"
    },
    ...
]

# Input
- original claims: {Claims}
- business logic knowledge: {Business Logic Knowledge}
- risk pattern knowledge: {Risk Pattern Knowledge}
";

pub const SUSPECT_THEN_RULE_OUT: &str = "\
# Task Description
You are a senior e-commerce risk management expert. Your task is to \"reverse-engineer\" and \"recreate\" your initial, complete internal thought process as the expert, based on the final review conclusion (which risks were accepted and which were rejected). This process must be presented as a first-person soliloquy and must sound like a genuine expert analyzing data in real-time.

# Input Information
1. input data: Raw input data.
2. accepted risks: List of risk factors you ultimately confirmed and accepted.
3. rejected risks: List of risk factors you initially suspected but ultimately ruled out.

# Core Requirements for the Soliloquy
Your soliloquy must be a coherent narrative that skillfully integrates the following two thought processes:
1. For Accepted risk factors (Confirmation Logic):
  - Describe how you identified the relevant anomalous data.
  - Demonstrate how you connected the clues and applied risk management knowledge to confirm their riskiness.
  - Use affirmative, confident language (e.g., \"This point is suspicious,\" \"This confirms my suspicion\").
2. For Rejected risk factors (Exclusion Logic):
  - Must reflect the \"suspect first, rule out later\" process.
  - Step 1: Acknowledge surface anomaly. First, acknowledge why this point \"appeared\" to be a risk (e.g., \"When I first saw this huge amount of orders, I thought it was abnormal...\").
  - Step 2: Seek plausible explanation. Describe your process of seeking more contextual information to validate this suspicion (e.g., \"But I won't jump to conclusions yet; let me look at this user's background...\").
  - Step 3: Find exclusion evidence. Clearly identify the specific data point or business knowledge that led you to dismiss the initial suspicion (e.g., \"Ah, I see the user segment is 'Verified Enterprise Customer.' This amount is routine for their procurement, so that's fine.\").
  - Step 4: State exclusion conclusion. Clearly state that you have ruled out this risk factor.

# Output Format Requirements
1. Soliloquy First, Summary Later: Output the full personal soliloquy first.
2. Clear Separation: After the soliloquy, use `---` as a separator.
3. Final Conclusion: After the separator, list only the **accepted** risk factors to form the final risk assessment report.

# Input Data
- raw data: {Raw Data}
- accepted risks: {Accepted Risks Json}
- rejected risks: {Rejected Risks Json}
";

pub const INITIAL_ANALYSIS: &str = "\
# Task Description
You are an e-commerce risk investigation analyst. Examine the case below and list every risk factor you can support from the data. Use the glossary, when present, to interpret platform-specific terms.

# Output Format
A JSON array of objects with a claim field, one object per risk factor.
[
    {\"claim\": \"[risk factor]\"},
    ...
]
Output an empty array if no risk factor is supported.

{Glossary}{Case}";

pub const CLAIM_CLASSIFICATION: &str = "\
# Task Description
You are grading risk factors produced by an analysis system against expert labels for the same case. For each generated risk factor decide its category and whether it is consistent with the case data.

# Categories
- core: matches one of the expert core risk factors (decisive for the verdict).
- relevant: matches one of the expert relevant risk factors (supportive context).
- noise: false, unsupported, or irrelevant to the case.

# Output Format
A JSON array with one object per generated risk factor, in input order.
[
    {
        \"claim\": \"[generated risk factor, verbatim]\",
        \"category\": \"core\" | \"relevant\" | \"noise\",
        \"fact_aligned\": true | false,
        \"gold_match\": \"[matched expert risk factor, verbatim, or null]\"
    },
    ...
]

# Input
- case data: {Case}
- expert core risk factors: {Core}
- expert relevant risk factors: {Relevant}
- generated risk factors: {Generated}
";

pub const TERM_EXTRACTION: &str = "\
# Task Description
You are building a glossary of risk management terminology. Read the document and list the domain-specific terms it uses together with the definition the document gives or implies.

# Output Format
A JSON array of objects with term and definition fields.
[
    {\"term\": \"[term]\", \"definition\": \"[definition from the document]\"},
    ...
]
Output an empty array if the document defines no domain terms.

# Input
- document kind: {Kind}
- document: {Document}
";

pub const TERM_EXPLANATION: &str = "\
Explain the following e-commerce risk management term in one short paragraph.

Term: {Concept}
";

pub const PATTERN_CONSOLIDATION: &str = "\
# Task Description
The risk patterns below were extracted from different rule models and describe the same underlying behaviour. Merge their descriptions into one description that keeps every threshold and feature relationship.

# Output Format
The merged description as plain text, nothing else.

# Input
- pattern name: {Name}
- descriptions: {Descriptions}
";

/// The fixed text of a template.
pub fn template_text(id: TemplateId) -> &'static str {
    match id {
        TemplateId::ConceptScoring => CONCEPT_SCORING,
        TemplateId::ScenarioKnowledge => SCENARIO_KNOWLEDGE,
        TemplateId::RiskPatternExtraction => RISK_PATTERN_EXTRACTION,
        TemplateId::FactVerification => FACT_VERIFICATION,
        TemplateId::KnowledgeCheck => KNOWLEDGE_CHECK,
        TemplateId::SuspectThenRuleOut => SUSPECT_THEN_RULE_OUT,
        TemplateId::InitialAnalysis => INITIAL_ANALYSIS,
        TemplateId::ClaimClassification => CLAIM_CLASSIFICATION,
        TemplateId::TermExtraction => TERM_EXTRACTION,
        TemplateId::TermExplanation => TERM_EXPLANATION,
        TemplateId::PatternConsolidation => PATTERN_CONSOLIDATION,
    }
}

/// Renders a template, panicking in debug builds if a placeholder the
/// template declares is left unfilled.
pub fn render(id: TemplateId, vars: &[(&str, &str)]) -> String {
    let text = template_text(id);
    debug_assert!(
        placeholders(text).iter().all(|p| vars.iter().any(|(k, _)| k == p)),
        "unfilled placeholder in {id}"
    );
    fill_template(text, vars)
}

/// `{Name}` slots a template declares (names may contain spaces).
pub fn placeholders(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close)
                if close > 0
                    && after[..close].chars().all(|c| c.is_ascii_alphabetic() || c == ' ')
                    && after[..close].starts_with(|c: char| c.is_ascii_uppercase()) =>
            {
                if !out.contains(&&after[..close]) {
                    out.push(&after[..close]);
                }
                rest = &after[close + 1..];
            }
            _ => rest = after,
        }
    }
    out
}
