#pragma once

// Synthetic story world. A latent (topic, persona, entity, location) is drawn
// uniformly per attribute and rendered through templates, so every document
// carries exact ground-truth annotations and can be labeled back exactly.

#include "anchor/rng.hpp"
#include "anchor/tokenizer.hpp"
#include "anchor/types.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace anchor {

struct Catalogs {
    std::array<std::vector<std::string>, kAttributeCount> values;

    const std::vector<std::string>& operator[](Attribute a) const { return values[index_of(a)]; }
    std::vector<std::string>& operator[](Attribute a) { return values[index_of(a)]; }
};

struct WorldSpec {
    Catalogs catalogs;
    std::vector<std::string> opening_templates;  // mention every attribute
    std::vector<std::string> middle_templates;
    std::vector<std::string> prompt_templates;
    std::string closing = "the end .";
    std::size_t min_chunks = 2;
    std::size_t max_chunks = 5;
};

/// Topic and persona lists are nested: the first 5/14 topics and the first
/// 8/12 personas form the restricted subsets.
inline std::vector<std::string> default_topics() {
    return {"space exploration", "gardens", "talking animals", "treasure hunts", "hidden treasures",
            "the sky", "fairy tales", "the arts", "secret societies", "outer space",
            "school life", "riddles", "undercover missions", "seasonal changes", "invisibility",
            "holidays", "mystical creatures", "dream worlds", "living objects", "subterranean worlds",
            "enchanted forests", "dinosaurs", "shape-shifting", "bygone eras", "underwater adventures",
            "unusual vehicles", "a deadline or time limit", "superheroes", "island adventures",
            "robots and technology", "mysterious maps", "alien encounters", "sibling rivalry",
            "magical lands", "royal kingdoms", "virtual worlds", "cultural traditions",
            "lost civilizations", "miniature worlds", "sports", "time travel", "haunted places",
            "magical objects", "lost cities", "fantasy worlds", "pirates", "giant creatures",
            "snowy adventures"};
}

inline std::vector<std::string> default_personas() {
    return {"an innocent author", "someone who loves order and structure", "a hopeless romantic",
            "a hurt ill-intentioned person", "a wise old person who wants to teach the young", "a father",
            "a powerful leader", "the everyman", "a philosopher", "an explorer archetype",
            "someone who wants to prove a point", "a pedant", "someone curious", "a cruel person",
            "an academic", "a jester archetype", "a poet", "someone evil", "a child", "a mother",
            "a moralistic teacher", "a rebellious author", "the oppressed"};
}

inline WorldSpec default_world_spec() {
    WorldSpec w;
    w.catalogs[Attribute::Topic] = default_topics();
    w.catalogs[Attribute::Persona] = default_personas();
    w.catalogs[Attribute::Entity] = {"ada",  "bram", "cleo", "dorin", "elsa", "fitz", "gwen",  "hale",
                                     "ivo",  "juno", "kit",  "lina",  "milo", "nora", "otto",  "pia",
                                     "quinn", "rosa", "sven", "tara", "ugo",  "vera", "wren",  "xan",
                                     "yara", "zeb",  "arlo", "bea",  "cyrus", "dell", "esme", "finn"};
    w.catalogs[Attribute::Location] = {"ashford",  "brightwater", "coldharbor",  "dunmore",   "eldergrove",
                                       "fairhaven", "glenrock",   "hollowmere",  "ironvale",  "juniper",
                                       "kingsbridge", "larkspur", "millbrook",   "northwood", "oakridge",
                                       "pinecrest", "quarryton",  "riverbend",   "stonebridge", "thornfield",
                                       "umberlee",  "valewood",   "westmarch",   "yarrowby"};
    w.opening_templates = {
        "once upon a time in {location} there lived {entity} , {persona} , who cared about {topic} .",
        "in {location} lived {entity} . {entity} was {persona} and dreamed of {topic} .",
        "this is a tale of {topic} . it begins in {location} with {entity} , {persona} .",
    };
    w.middle_templates = {
        "one morning {entity} walked across {location} .",
        "everyone in {location} talked about {topic} .",
        "{entity} spoke like {persona} would .",
        "nothing felt as exciting as {topic} .",
        "the streets of {location} were quiet that night .",
        "{entity} smiled and kept going .",
        "being {persona} was never easy .",
        "soon {entity} learned something new about {topic} .",
    };
    w.prompt_templates = {
        "write a story .",
        "tell me a story .",
        "please write a short story .",
        "i would like a story .",
        "can you tell me a story ?",
    };
    return w;
}

/// Placeholders referenced by a template, in canonical attribute order.
inline std::vector<Attribute> template_attributes(std::string_view tpl) {
    std::vector<Attribute> out;
    for (Attribute a : kAttributes) {
        const std::string ph = "{" + std::string(name_of(a)) + "}";
        if (tpl.find(ph) != std::string_view::npos) out.push_back(a);
    }
    return out;
}

inline std::string fill_template(std::string_view tpl, const SemanticLatent& z) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            const auto close = tpl.find('}', i);
            if (close == std::string_view::npos) throw std::invalid_argument("unterminated placeholder in template");
            const std::string_view name = tpl.substr(i + 1, close - i - 1);
            bool found = false;
            for (Attribute a : kAttributes) {
                if (name == name_of(a)) {
                    out += z[a];
                    found = true;
                }
            }
            if (!found) throw std::invalid_argument("unknown placeholder {" + std::string(name) + "}");
            i = close + 1;
        } else {
            out += tpl[i++];
        }
    }
    return out;
}

inline void validate(const WorldSpec& spec) {
    for (Attribute a : kAttributes) {
        const auto& cat = spec.catalogs[a];
        if (cat.empty()) throw std::invalid_argument("world: empty " + std::string(name_of(a)) + " catalog");
        std::unordered_set<std::string> seen;
        for (const auto& v : cat) {
            if (v.empty() || split_words(v).empty()) {
                throw std::invalid_argument("world: blank value in " + std::string(name_of(a)) + " catalog");
            }
            if (!seen.insert(v).second) {
                throw std::invalid_argument("world: duplicate " + std::string(name_of(a)) + " value '" + v + "'");
            }
        }
    }
    if (spec.opening_templates.empty() || spec.middle_templates.empty() || spec.prompt_templates.empty()) {
        throw std::invalid_argument("world: template lists must be non-empty");
    }
    for (const auto& t : spec.opening_templates) {
        if (template_attributes(t).size() != kAttributeCount) {
            throw std::invalid_argument("world: opening template must mention every attribute: " + t);
        }
    }
    if (spec.min_chunks < 1 || spec.max_chunks < spec.min_chunks) {
        throw std::invalid_argument("world: need 1 <= min_chunks <= max_chunks");
    }
}

/// Allowed value indices per attribute; an empty list means unrestricted.
struct Restriction {
    std::array<std::vector<std::size_t>, kAttributeCount> allowed;

    bool restricted(Attribute a) const { return !allowed[index_of(a)].empty(); }

    /// First k catalog values of attribute a.
    Restriction& prefix(Attribute a, std::size_t k) {
        if (k == 0) throw std::invalid_argument("restriction: empty allowed set for " + std::string(name_of(a)));
        auto& v = allowed[index_of(a)];
        v.clear();
        for (std::size_t i = 0; i < k; ++i) v.push_back(i);
        return *this;
    }

    Restriction& values(const WorldSpec& spec, Attribute a, const std::vector<std::string>& names) {
        if (names.empty()) throw std::invalid_argument("restriction: empty allowed set for " + std::string(name_of(a)));
        const auto& cat = spec.catalogs[a];
        auto& v = allowed[index_of(a)];
        v.clear();
        for (const auto& n : names) {
            const auto it = std::find(cat.begin(), cat.end(), n);
            if (it == cat.end()) {
                throw std::invalid_argument("restriction: '" + n + "' is not a " + std::string(name_of(a)));
            }
            v.push_back(static_cast<std::size_t>(it - cat.begin()));
        }
        return *this;
    }

    std::size_t support(const WorldSpec& spec, Attribute a) const {
        return restricted(a) ? allowed[index_of(a)].size() : spec.catalogs[a].size();
    }
};

inline SemanticLatent sample_latent(const WorldSpec& spec, Rng& rng, const Restriction& restriction = {}) {
    SemanticLatent z;
    for (Attribute a : kAttributes) {
        const auto& cat = spec.catalogs[a];
        const auto& allowed = restriction.allowed[index_of(a)];
        if (allowed.empty()) {
            z[a] = cat[rng.index(cat.size())];
        } else {
            const std::size_t k = allowed[rng.index(allowed.size())];
            if (k >= cat.size()) throw std::out_of_range("restriction index outside catalog");
            z[a] = cat[k];
        }
    }
    return z;
}

inline TagList tags_for(const SemanticLatent& z, const std::vector<Attribute>& attrs) {
    TagList tags;
    for (Attribute a : attrs) tags.push_back({std::string(name_of(a)), z[a]});
    return tags;
}

inline TagList tags_for(const SemanticLatent& z) {
    return tags_for(z, std::vector<Attribute>(kAttributes.begin(), kAttributes.end()));
}

struct DocumentSample {
    std::string doc_id;
    SemanticLatent latent;
    std::vector<std::string> chunks;
    std::vector<TagList> annotations;  // one list per chunk
    std::optional<std::string> prompt;

    std::string text() const {
        std::string out;
        for (std::size_t i = 0; i < chunks.size(); ++i) {
            if (i) out += tok::kParagraph;
            out += chunks[i];
        }
        return out;
    }
};

inline DocumentSample render_document(const WorldSpec& spec, const SemanticLatent& z, Rng& rng) {
    DocumentSample doc;
    doc.latent = z;
    const std::size_t n = static_cast<std::size_t>(
        rng.between(static_cast<std::int64_t>(spec.min_chunks), static_cast<std::int64_t>(spec.max_chunks)));
    const std::string& opening = spec.opening_templates[rng.index(spec.opening_templates.size())];
    doc.chunks.push_back(fill_template(opening, z));
    doc.annotations.push_back(tags_for(z, template_attributes(opening)));
    for (std::size_t i = 1; i < n; ++i) {
        const std::string& tpl = spec.middle_templates[rng.index(spec.middle_templates.size())];
        doc.chunks.push_back(fill_template(tpl, z));
        doc.annotations.push_back(tags_for(z, template_attributes(tpl)));
    }
    return doc;
}

/// Keyword labeler: per attribute, the catalog phrase with the earliest
/// word-aligned occurrence wins; at equal start the longer phrase wins.
class ExactLabeler {
public:
    explicit ExactLabeler(const Catalogs& catalogs) {
        for (Attribute a : kAttributes) {
            auto& table = by_first_[index_of(a)];
            for (const auto& value : catalogs[a]) {
                auto words = split_words(value);
                const std::string first = words.front();
                table[first].push_back(Phrase{std::move(words), value});
            }
            for (auto& [_, phrases] : table) {
                std::stable_sort(phrases.begin(), phrases.end(),
                                 [](const Phrase& x, const Phrase& y) { return x.words.size() > y.words.size(); });
            }
        }
    }

    SemanticLatent label(std::string_view text) const { return label_words(split_words(text)); }

    SemanticLatent label_words(const std::vector<std::string>& words) const {
        SemanticLatent z;
        for (Attribute a : kAttributes) z[a] = kOther;
        for (Attribute a : kAttributes) {
            const auto& table = by_first_[index_of(a)];
            for (std::size_t i = 0; i < words.size() && z[a] == kOther; ++i) {
                const auto it = table.find(words[i]);
                if (it == table.end()) continue;
                for (const Phrase& p : it->second) {
                    if (i + p.words.size() <= words.size() &&
                        std::equal(p.words.begin(), p.words.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
                        z[a] = p.value;
                        break;
                    }
                }
            }
        }
        return z;
    }

private:
    struct Phrase {
        std::vector<std::string> words;
        std::string value;
    };
    std::array<std::unordered_map<std::string, std::vector<Phrase>>, kAttributeCount> by_first_;
};

inline SemanticLatent exact_label(const WorldSpec& spec, std::string_view text) {
    return ExactLabeler(spec.catalogs).label(text);
}

inline std::string doc_id(std::string_view prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix << '-' << std::setw(8) << std::setfill('0') << i;
    return os.str();
}

/// Unrestricted documents. A fraction carries an instruction prompt in front
/// of the story, so that the prompt-to-story transition is seen before SFT.
inline std::vector<DocumentSample> build_pretraining_corpus(const WorldSpec& spec, std::size_t n_docs,
                                                            std::uint64_t seed, double instruction_fraction = 0.0) {
    if (n_docs == 0) throw std::invalid_argument("build_pretraining_corpus: n_docs must be positive");
    if (instruction_fraction < 0.0 || instruction_fraction > 1.0) {
        throw std::invalid_argument("build_pretraining_corpus: instruction_fraction outside [0,1]");
    }
    validate(spec);
    std::vector<DocumentSample> docs;
    docs.reserve(n_docs);
    for (std::size_t i = 0; i < n_docs; ++i) {
        Rng rng(derive_seed(seed, i));
        const SemanticLatent z = sample_latent(spec, rng);
        DocumentSample d = render_document(spec, z, rng);
        if (rng.bernoulli(instruction_fraction)) {
            d.prompt = spec.prompt_templates[rng.index(spec.prompt_templates.size())];
        }
        d.doc_id = doc_id("pt", i);
        docs.push_back(std::move(d));
    }
    return docs;
}

struct DatasetEntropy {
    std::array<double, kAttributeCount> bits{};  // log2 of the allowed support
    std::array<bool, kAttributeCount> restricted{};
};

struct SftDataset {
    std::vector<DocumentSample> examples;  // prompt set; last chunk is the closing
    DatasetEntropy entropy;
    Restriction restriction;
};

inline DatasetEntropy dataset_entropy(const WorldSpec& spec, const Restriction& r) {
    DatasetEntropy e;
    for (Attribute a : kAttributes) {
        e.bits[index_of(a)] = std::log2(static_cast<double>(r.support(spec, a)));
        e.restricted[index_of(a)] = r.restricted(a);
    }
    return e;
}

/// Prompt/response pairs whose latents follow the restriction. The response
/// is the rendered story followed by a closing chunk.
inline SftDataset build_posttraining_subset(const WorldSpec& spec, std::size_t n_examples,
                                            const Restriction& restriction, std::uint64_t seed) {
    validate(spec);
    for (Attribute a : kAttributes) {
        for (std::size_t k : restriction.allowed[index_of(a)]) {
            if (k >= spec.catalogs[a].size()) {
                throw std::out_of_range("restriction index outside " + std::string(name_of(a)) + " catalog");
            }
        }
    }
    SftDataset ds;
    ds.restriction = restriction;
    ds.entropy = dataset_entropy(spec, restriction);
    ds.examples.reserve(n_examples);
    for (std::size_t i = 0; i < n_examples; ++i) {
        Rng rng(derive_seed(seed, i));
        const SemanticLatent z = sample_latent(spec, rng, restriction);
        DocumentSample d = render_document(spec, z, rng);
        d.chunks.push_back(spec.closing);
        d.annotations.push_back({});
        d.prompt = spec.prompt_templates[rng.index(spec.prompt_templates.size())];
        d.doc_id = doc_id("sft", i);
        ds.examples.push_back(std::move(d));
    }
    return ds;
}

// JSONL shard records: {doc_id, latent{...}, chunks[], annotations[][{key,value}], prompt?}

inline nlohmann::ordered_json to_json(const DocumentSample& d) {
    nlohmann::ordered_json j;
    j["doc_id"] = d.doc_id;
    nlohmann::ordered_json latent;
    for (Attribute a : kAttributes) latent[std::string(name_of(a))] = d.latent[a];
    j["latent"] = latent;
    j["chunks"] = d.chunks;
    auto anns = nlohmann::ordered_json::array();
    for (const auto& tags : d.annotations) {
        auto list = nlohmann::ordered_json::array();
        for (const auto& t : tags) list.push_back({{"key", t.key}, {"value", t.value}});
        anns.push_back(list);
    }
    j["annotations"] = anns;
    if (d.prompt) j["prompt"] = *d.prompt;
    return j;
}

inline DocumentSample document_from_json(const nlohmann::json& j) {
    DocumentSample d;
    d.doc_id = j.at("doc_id").get<std::string>();
    for (Attribute a : kAttributes) d.latent[a] = j.at("latent").at(std::string(name_of(a))).get<std::string>();
    d.chunks = j.at("chunks").get<std::vector<std::string>>();
    for (const auto& list : j.at("annotations")) {
        TagList tags;
        for (const auto& t : list) tags.push_back({t.at("key").get<std::string>(), t.at("value").get<std::string>()});
        d.annotations.push_back(std::move(tags));
    }
    if (j.contains("prompt")) d.prompt = j.at("prompt").get<std::string>();
    if (d.annotations.size() != d.chunks.size()) {
        throw std::runtime_error("record " + d.doc_id + ": annotations/chunks length mismatch");
    }
    return d;
}

inline std::string shard_name(std::size_t i) {
    std::ostringstream os;
    os << "shard-" << std::setw(5) << std::setfill('0') << i << ".jsonl";
    return os.str();
}

/// Writes records in order, `per_shard` records per file. Returns file paths.
inline std::vector<std::string> write_shards(const std::filesystem::path& dir, const std::vector<DocumentSample>& docs,
                                             std::size_t per_shard) {
    if (per_shard == 0) throw std::invalid_argument("write_shards: per_shard must be positive");
    std::filesystem::create_directories(dir);
    std::vector<std::string> paths;
    for (std::size_t s = 0; s * per_shard < docs.size(); ++s) {
        const auto path = dir / shard_name(s);
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write shard " + path.string());
        const std::size_t end = std::min(docs.size(), (s + 1) * per_shard);
        for (std::size_t i = s * per_shard; i < end; ++i) out << to_json(docs[i]).dump() << '\n';
        if (!out) throw std::runtime_error("write failed for shard " + path.string());
        paths.push_back(path.string());
    }
    return paths;
}

inline std::vector<DocumentSample> read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<DocumentSample> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            docs.push_back(document_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return docs;
}

/// Reads every shard-*.jsonl under dir in name order.
inline std::vector<DocumentSample> read_shards(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("shard-", 0) == 0 && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    if (files.empty()) throw std::runtime_error("no shards found in " + dir.string());
    std::sort(files.begin(), files.end());
    std::vector<DocumentSample> docs;
    for (const auto& f : files) {
        auto part = read_jsonl(f);
        docs.insert(docs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return docs;
}

/// Every text the world can emit, for building a closed vocabulary.
inline std::vector<std::string> world_texts(const WorldSpec& spec) {
    std::vector<std::string> texts;
    for (Attribute a : kAttributes) {
        texts.emplace_back(name_of(a));
        for (const auto& v : spec.catalogs[a]) texts.push_back(v);
    }
    auto strip = [](const std::string& t) {
        std::string out;
        std::size_t i = 0;
        while (i < t.size()) {
            if (t[i] == '{') {
                i = t.find('}', i) + 1;
                out += ' ';
            } else {
                out += t[i++];
            }
        }
        return out;
    };
    for (const auto& t : spec.opening_templates) texts.push_back(strip(t));
    for (const auto& t : spec.middle_templates) texts.push_back(strip(t));
    for (const auto& t : spec.prompt_templates) texts.push_back(t);
    texts.push_back(spec.closing);
    return texts;
}

/// Closed vocabulary over the world's surface words plus the paragraph token.
inline Vocab build_world_vocab(const WorldSpec& spec) {
    Vocab v = Vocab::build(world_texts(spec));
    v.add_word(std::string(tok::kParagraph));
    return v;
}

// World spec files: {catalogs{topic[],persona[],entity[],location[]},
// opening[], middle[], prompts[], closing, min_chunks, max_chunks}

inline nlohmann::ordered_json to_json(const WorldSpec& spec) {
    nlohmann::ordered_json cat;
    for (Attribute a : kAttributes) cat[std::string(name_of(a))] = spec.catalogs[a];
    return {{"catalogs", cat},
            {"opening", spec.opening_templates},
            {"middle", spec.middle_templates},
            {"prompts", spec.prompt_templates},
            {"closing", spec.closing},
            {"min_chunks", spec.min_chunks},
            {"max_chunks", spec.max_chunks}};
}

inline WorldSpec world_spec_from_json(const nlohmann::json& j) {
    WorldSpec spec;
    for (Attribute a : kAttributes) {
        spec.catalogs[a] = j.at("catalogs").at(std::string(name_of(a))).get<std::vector<std::string>>();
    }
    spec.opening_templates = j.at("opening").get<std::vector<std::string>>();
    spec.middle_templates = j.at("middle").get<std::vector<std::string>>();
    spec.prompt_templates = j.at("prompts").get<std::vector<std::string>>();
    spec.closing = j.at("closing").get<std::string>();
    spec.min_chunks = j.at("min_chunks").get<std::size_t>();
    spec.max_chunks = j.at("max_chunks").get<std::size_t>();
    validate(spec);
    return spec;
}

}  // namespace anchor
