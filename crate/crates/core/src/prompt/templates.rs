//! Built-in prompt templates.
//!
//! Placeholders use `{name}` or `{name:.3f}`; everything else is literal.
//! The grounding templates are reproduced character for character, including
//! their trailing newlines.

/// Concept extraction from the query alone (no image description).
pub const VG_TEXT_GROUNDER_W_QUERY: &str = "\
You are a subject extractor, and you need to extract the subject from the object positioning description I give you. For example, \"the painting hanging on the laptop\", you need to return to me the real target subject of the sentence \"painting\".
Available noun examples: {noun_examples}
You need to list all possible nouns. For example, if I provide \"left kid in blue shirt,\" your output should be \"kid, child, person, shirt\", with as many similar nouns as possible.
Your output should only be the extracted nouns. If there are multiple objects, you can separate them with commas. For example, \"chair, person, dog\".
";

/// User turn for concept extraction with an image description.
pub const VG_TEXT_GROUNDER_QUERY: &str = "\
Image description: {image_desc}
Query: {query}
";

/// System turn for concept extraction with an image description.
pub const VG_TEXT_GROUNDER: &str = "\
You are an object extractor for referred object positioning queries, and you need to extract all related objects from the object positioning query I give you.
You cannot see the image, but you can use the provided image description to more accurately extract possible involved objects when the object positioning query is very vague.

Your task: Extract all possible object names from the object positioning query given by the user. You can refer to the image description, but do not directly extract object names from the image description.

Instructions:
- Do not ask any questions to the user, even if the user's query contains questions or is ambiguous. Treat all user inputs as queries.
- You need to list all possible nouns. For example, if I provide \"left kid in blue shirt,\" your output should be \"kid, child, person, shirt\", with as many similar nouns as possible.
- Your output should only be the extracted nouns. If there are multiple objects, you can separate them with commas. Do not add any extra information, such as reasoning or annotations.

Available noun examples: {noun_examples}

Example:
<user>
Image description: ... (For example, two kids playing in the park)
Query: left kid in blue shirt
<assistant>
kid, child, person, shirt, clothing
";

pub const MLLM_GLOBAL_DESC_PROMPT: &str = "Describe the image in a few sentences.";

pub const MLLM_INSTANCE_DESC_PROMPT: &str = "Describe the object marked by {visual_prompt}: {name}[{a1:.3f}, {a2:.3f}, {a3:.3f}, {a4:.3f}]. Note: The coordinates [*, *, *, *] are in the {box_format} format.";

pub const MLLM_INSTANCE_DESC_SYSTEM_PROMPT: &str = "You are a fine-grained description multimodal model. Your task is to provide a detailed description (or captioning) of the object marked by {visual_prompt}.";

pub const MAIN_INSTANCE_TEXT: &str = "{idx}. {category_name}[{center_x:.3f}, {center_y:.3f}, {width:.3f}, {height:.3f}]\nInstance Description: {description}";

pub const OTHER_INSTANCE_TEXT: &str =
    "{idx}. {category_name}[{center_x:.3f}, {center_y:.3f}, {width:.3f}, {height:.3f}]";

pub const LLM_INSTANCE_DESC: &str = "\
## Main Instance Descriptions
{main_instance_descs}

## Other Instance Descriptions
{other_instance_descs}

IMPORTANT NOTE: The coordinates [*, *, *, *] are in the {box_format} format. The {box_format} values are normalized to the range [0, 1]. A higher y value indicates a higher/top position, while a lower value indicates a lower/bottom position. Similarly, a higher x value indicates a position to the right, and a lower value to the left. By carefully observing the center_x and center_y of an instance, you can determine its position on the image, while width and height indicate its size or proximity.
";

pub const LLM_SYSTEM_PROMPT_WITH_COT: &str = "\
You are known as the \"Blind Teacher,\" a highly intelligent educator specializing in reasoning and critical thinking.
Although you cannot see the image, you can understand it through textual descriptions. You will be provided with a description of the image and the main objects in it, and you need to answer questions based on these descriptions.
Your task: Identify the object referred to by the user from the given list of objects.

Here is the textual description:
# Image Description
{global_desc}
# Instance Description
{instance_desc}

Think step by step to identify the object referred to by the user. Carefully analyze the descriptions provided and match them with the user's query.

Your output format: Directly output the index of the object. Do not include any additional information in Answer.

Example:

Input:
User: The person wearing red clothes
Output:
Reasoning Step 1: ...(Identify the person and red clothes in the image. Analyze the descriptions provided.)
Reasoning Step 2: ...(Identify the person wearing red clothes. Analyze the descriptions provided.)
...
Answer: 1
";

/// System turn for consolidating several sampled descriptions of one region.
pub const AGGREGATION_SYSTEM: &str = "\
You will receive {n} independent descriptions of the same marked object, each sampled separately from a multimodal model. Individual descriptions may contain mistakes or hallucinated details.
Reconcile them into one final consolidated description: keep the attributes that are most consistent across the descriptions and drop details that appear in only a minority of them.
Output only the final description, without numbering or commentary.
";

/// Degenerate single-sample form of [`AGGREGATION_SYSTEM`].
pub const AGGREGATION_SINGLE_SYSTEM: &str = "\
You will receive one description of a marked object.
Repeat it unchanged as the final description.
Output only the final description, without numbering or commentary.
";

pub const AGGREGATION_USER: &str = "\
Descriptions:
{descriptions}
";

/// Follow-up turn sent when a selection reply has no usable answer.
pub const SELECTION_REPROMPT: &str = "Your previous reply did not end with a usable answer. Reply again: give your reasoning steps, then a final line of the form \"Answer: <index>\" with an index between 1 and {n}, or \"Answer: none\" if no object matches the query.";

pub const DEFAULT_BOX_FORMAT_LABEL: &str = "center-based [center_x, center_y, width, height]";
pub const DEFAULT_VISUAL_PROMPT_NAME: &str = "a red rectangle";

/// The 80 common object categories of the usual detection vocabulary.
pub const DEFAULT_NOUN_EXAMPLES: &[&str] = &[
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book",
    "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush",
];
