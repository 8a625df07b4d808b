//! Versioned prompt assets.
//!
//! Templates use `{name}` placeholders filled by [`fill`]. The revision
//! string returned by [`prompt_revision`] is a content hash over every
//! template and is recorded in run manifests.

use crate::text::sha256_hex;

pub const FINAL_ANSWER_MARKER: &str = "Final Answer:";
pub const TOOL_CALL_OPEN: &str = "<tool_call>";
pub const TOOL_CALL_CLOSE: &str = "</tool_call>";

pub const CHUNKER_SYSTEM: &str = "\
You are a corpus preprocessor. Clean the document below: remove markup, \
navigation text, boilerplate and other artifacts. Then condense it into \
self-contained, information-dense passages that each cover one topic and \
keep every concrete fact (names, dates, quantities). Output only the \
passages, separated by a line containing exactly =====";

pub const CHUNK_SEPARATOR: &str = "=====";

pub const SEED_SYSTEM: &str = "\
You are a question writer. You receive three thematically related passages. \
Write one question whose answer requires combining information from all \
three passages, together with its short, unambiguous answer. Respond with \
only a JSON object of the form {\"question\": \"...\", \"answer\": \"...\"}.";

pub const SEED_USER: &str = "Passage 1:\n{c1}\n\nPassage 2:\n{c2}\n\nPassage 3:\n{c3}";

pub const TOOL_PROTOCOL: &str = "\
Work in rounds. In each round write a reasoning report that summarizes the \
evidence gathered so far, assesses progress, and states the next action. \
End the round with exactly one of:
- one or more tool calls, each a JSON object inside <tool_call></tool_call> tags, \
of the form {\"name\": \"<tool>\", \"arguments\": {...}}
- a final line of the form \"Final Answer: <answer>\"

Available tools (all accept batches):
- search: {\"query\": [\"...\"]} web search, returns title, snippet and url per result
- scholar: {\"query\": [\"...\"]} scholarly search, returns publication metadata
- browser: {\"url\": \"...\", \"goal\": \"...\"} reads a page and extracts what the goal asks for
- code: {\"script\": \"...\"} runs a Python script in a sandbox and returns stdout and stderr";

pub const NO_TOOL_PROTOCOL: &str = "\
No tools are available. Reason from your own knowledge. Write a reasoning \
report and end with a final line of the form \"Final Answer: <answer>\"";

pub const SOLVER_SYSTEM: &str = "\
You are a research agent answering a question with a short, exact answer.

{protocol}";

pub const REFINE_SYSTEM: &str = "\
Role and Objective:
You are a sophisticated agent tasked with iterative data refinement. Your primary mission is to transform a given Question-Answer pair (q_k, a_k) into a more complex, in-depth, and factually grounded pair (q_{k+1}, a_{k+1}). This escalation must be achieved by leveraging a specialized tool suite T = {T_search, T_scholar, T_browser, T_code}.

Input:
The current QA pair (q_k, a_k) in a structured format.

Mandatory Refinement Protocol:
Your task is to generate a new, superior QA pair by applying one or more of the following four refinement dimensions. For each generated pair, you must utilize the provided tools and explicitly log their usage.

1. Knowledge Expansion:
   - Objective: Broaden the informational scope of the QA pair.
   - Action: You must use the T_search, T_scholar, or T_browser tools to discover and retrieve relevant background knowledge, historical context, or contrasting perspectives.
   - Implementation: Weave this new information seamlessly into the refined question (q_{k+1}) and provide a comprehensive explanation in the refined answer (a_{k+1}).

2. Conceptual Abstraction:
   - Objective: Elevate the level of abstract reasoning required.
   - Action: Analyze the core concepts within (q_k, a_k). Formulate a new question (q_{k+1}) that requires identifying higher-level principles, synthesizing information to uncover subtle relationships, or drawing non-obvious analogies.
   - Implementation: The refined answer (a_{k+1}) must explicitly articulate this abstract principle or relationship. You may use T_scholar to find established theoretical frameworks to aid this process.

3. Factual Grounding:
   - Objective: Enhance the factual accuracy, precision, and verifiability.
   - Action: You must use T_search and T_scholar to perform multi-source cross-validation of the facts and claims in a_k.
   - Implementation: Augment the refined answer (a_{k+1}) with precise quantitative data, specific named entities, and direct citations or references to the authoritative sources you retrieved.

4. Computational Formulation:
   - Objective: Introduce a verifiable computational or logical reasoning challenge.
   - Action: You must use the T_code tool (a Python execution environment) to design a new question (q_{k+1}) that necessitates a quantitative calculation or algorithmic simulation.
   - Implementation: The refined answer (a_{k+1}) must contain: (1) The complete, executable Python code block used to solve the problem, and (2) The final output produced by the code, along with a brief explanation.

Tool Usage Protocol: {tools}
Final Instruction:
Proceed with the refinement of the provided (q_k, a_k). Your response must be only the final JSON object.
The JSON object goes after the final answer marker and has the form {\"question\": \"...\", \"answer\": \"...\", \"dimensions\": [\"knowledge_expansion\" | \"conceptual_abstraction\" | \"factual_grounding\" | \"computational_formulation\", ...]}";

pub const REFINE_REPROMPT: &str = "\
Your previous output could not be parsed. Respond again and make the final \
answer a single JSON object with string fields \"question\" and \"answer\" \
and a \"dimensions\" list.";

pub const TOOL_REPROMPT: &str = "\
Your tool call could not be parsed. Each call must be one JSON object \
{\"name\": ..., \"arguments\": {...}} inside <tool_call></tool_call> tags. \
Rewrite your last output.";

pub const BROWSER_SYSTEM: &str = "\
You extract information from a web page. Using only the page content, \
write a precise answer to the stated goal. Quote exact figures and names.";

pub const BROWSER_USER: &str = "Goal: {goal}\n\nPage ({url}):\n{content}";

pub const JUDGE_PROMPT: &str = "\
Judge whether the following [response] to [question] is correct or not based on the precise and unambiguous [correct_answer] below.

[question]: {question}

[response]: {response}

Your judgement must be in the format and criteria specified below:

extracted_final_answer: The final exact answer extracted from the [response]. Put the extracted answer as 'None' if there is no exact, final answer to extract from the response.

[correct_answer]: {correct_answer}

reasoning: Explain why the extracted_final_answer is correct or incorrect based on [correct_answer], focusing only on if there are meaningful differences between [correct_answer] and the extracted_final_answer. Do not comment on any background to the problem, do not attempt to solve the problem, do not argue for any answer different than [correct_answer], focus only on whether the answers match.

correct: Answer 'yes' if extracted_final_answer matches the [correct_answer] given above, or is within a small margin of error for numerical problems. Answer 'no' otherwise, i.e. if there if there is any inconsistency, ambiguity, non-equivalency, or if the extracted answer is incorrect.

confidence: The extracted confidence score between 0% and 100% from [response]. Put 100 if there is no confidence score available.";

pub const SIMILARITY_INSTRUCTION: &str = "\
Determine if the candidate QA pair expresses EXACTLY the same specific question and answer as the reference QA pair.

Requirements:
1. The question must ask for identical information with identical technical requirements.
2. The answer must provide identical content with identical technical details.
3. Any difference in the specific information requested or provided means they are NOT identical.
4. Pay special attention to mathematical expressions, symbols, and technical specifications.";

/// Which template a system message was rendered from. Used by the offline
/// simulated model to decide how to respond.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Chunker,
    Seed,
    Refine,
    Solver,
    Browser,
    Judge,
}

impl PromptKind {
    pub fn detect(system: &str) -> Option<Self> {
        let first = |t: &str| t.lines().next().unwrap_or_default().to_string();
        [
            (PromptKind::Chunker, first(CHUNKER_SYSTEM)),
            (PromptKind::Seed, first(SEED_SYSTEM)),
            (PromptKind::Refine, first(REFINE_SYSTEM)),
            (PromptKind::Solver, first(SOLVER_SYSTEM)),
            (PromptKind::Browser, first(BROWSER_SYSTEM)),
            (PromptKind::Judge, first(JUDGE_PROMPT)),
        ]
        .into_iter()
        .find(|(_, head)| system.starts_with(head.as_str()))
        .map(|(k, _)| k)
    }
}

/// Replace each `{key}` with its value. Unknown placeholders are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub fn solver_system(tools_enabled: bool) -> String {
    let protocol = if tools_enabled {
        TOOL_PROTOCOL
    } else {
        NO_TOOL_PROTOCOL
    };
    fill(SOLVER_SYSTEM, &[("protocol", protocol)])
}

pub fn refine_system() -> String {
    fill(REFINE_SYSTEM, &[("tools", TOOL_PROTOCOL)])
}

pub fn prompt_revision() -> String {
    let all = [
        CHUNKER_SYSTEM,
        SEED_SYSTEM,
        SEED_USER,
        TOOL_PROTOCOL,
        NO_TOOL_PROTOCOL,
        SOLVER_SYSTEM,
        REFINE_SYSTEM,
        REFINE_REPROMPT,
        TOOL_REPROMPT,
        BROWSER_SYSTEM,
        BROWSER_USER,
        JUDGE_PROMPT,
        SIMILARITY_INSTRUCTION,
    ]
    .join("\u{0}");
    sha256_hex(all)[..12].to_string()
}
