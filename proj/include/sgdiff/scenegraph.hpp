#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "sgdiff/common.hpp"
#include "sgdiff/rng.hpp"

// Scene-graph data model: parsing/validation of the JSON wire format,
// canonical linearization, triple extraction, synthetic graphs from box
// layouts, and attribute-swap hard negatives.

namespace sgdiff {

struct SgObject {
    int64_t id = 0;
    std::string category;
    std::vector<std::string> attributes;
    bool operator==(const SgObject&) const = default;
};

struct SgRelation {
    int64_t subject = 0;
    std::string predicate;
    int64_t object = 0;
    bool operator==(const SgRelation&) const = default;
};

struct SceneGraph {
    std::vector<SgObject> objects;
    std::vector<SgRelation> relations;
    bool operator==(const SceneGraph&) const = default;

    const SgObject& object_by_id(int64_t id) const;
};

// One relation with the endpoint categories and attributes pulled alongside.
struct Triple {
    std::string subject, predicate, object;
    std::vector<std::string> subject_attributes, object_attributes;
    bool operator==(const Triple&) const = default;
};

// Ordered token list; index 0 is PAD, index 1 is the null-condition token.
class Vocab {
public:
    static constexpr int64_t kPad = 0;
    static constexpr int64_t kNull = 1;
    static constexpr const char* kPadToken = "PAD";
    static constexpr const char* kNullToken = "∅";

    explicit Vocab(std::vector<std::string> tokens);

    // The fixed shape-world vocabulary (categories, colors, sizes, predicates).
    static const Vocab& shape_world();

    bool contains(const std::string& token) const;
    int64_t id(const std::string& token) const;  // LookupError on unknown token
    const std::string& token(int64_t id) const;
    int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    uint64_t hash() const { return hash_; }

private:
    std::vector<std::string> tokens_;
    std::vector<std::pair<std::string, int64_t>> index_;  // sorted for lookup
    uint64_t hash_ = 0;
};

enum class GraphErrorKind {
    kSyntax,            // malformed document, wrong types, unknown fields
    kUnknownToken,      // category/attribute/predicate outside the vocabulary
    kDanglingEndpoint,  // relation references a missing object
    kDuplicateId,       // two objects share an id
    kInvalidRelation,   // self-loop or duplicate (subject, predicate, object)
};

class GraphParseError : public std::runtime_error {
public:
    GraphParseError(GraphErrorKind kind, const std::string& msg, int line = 0, int column = 0)
        : std::runtime_error(msg), kind_(kind), line_(line), column_(column) {}
    GraphErrorKind kind() const { return kind_; }
    int line() const { return line_; }      // 1-based; 0 when not positional
    int column() const { return column_; }

private:
    GraphErrorKind kind_;
    int line_, column_;
};

// swap_hard_negative on a graph with no legal attribute exchange.
class NoNegativeAvailable : public std::runtime_error {
public:
    explicit NoNegativeAvailable(const std::string& msg) : std::runtime_error(msg) {}
};

// Fixed linearized-sequence length.
constexpr int64_t kSeqLen = 32;

// Parses either the canonical format ({"objects":[{"id","category",
// "attributes"}],"relations":[{"s","p","o"}]}) or the name-keyed variant
// (objects carry "name" instead of "id"/"category", relations reference
// names) which is normalized to ids in list order. The result is fully
// validated; every failure throws GraphParseError with a distinct kind.
SceneGraph parse_scene_graph(const std::string& text, const Vocab& vocab);

// Canonical wire form; parse_scene_graph(serialize_scene_graph(g)) == g.
std::string serialize_scene_graph(const SceneGraph& g);

// Empty iff every SceneGraph invariant holds. Violations are messages, one
// per broken invariant instance.
std::vector<std::string> validate(const SceneGraph& g, const Vocab& vocab);

// Token ids, padded/truncated to kSeqLen: objects sorted by id as
// [attributes..., category], then relations sorted by (subject, object) as
// [subject-category, predicate, object-category]. Overflow drops whole
// relations from the end before touching object tokens.
std::vector<int64_t> linearize(const SceneGraph& g, const Vocab& vocab);

// One Triple per relation, in linearize order (sorted by (subject, object)).
std::vector<Triple> extract_triples(const SceneGraph& g);

// The shared geometric predicate rule. Boxes are [x0,y0,x1,y1] in [0,1].
// Containment (strictly smaller box fully inside the other) wins; otherwise
// the dominant center offset picks the axis, ties toward horizontal.
// nullopt only for the degenerate case of identical centers without
// containment (never produced by the scene sampler).
std::optional<std::string> box_predicate(const std::array<double, 4>& a,
                                         const std::array<double, 4>& b);

// Builds a graph over the given boxes: categories/attributes become objects,
// relations are sampled geometric predicates — every object touches at least
// one relation, plus up to one extra per object.
SceneGraph synth_graph_from_layout(const std::vector<std::array<double, 4>>& boxes,
                                   const std::vector<std::string>& categories,
                                   const std::vector<std::vector<std::string>>& attributes,
                                   Rng& rng);

// Exchanges one attribute token between two objects (uniform over legal
// differing pairs), preserving relations and both token multisets. Throws
// NoNegativeAvailable when no pair qualifies.
SceneGraph swap_hard_negative(const SceneGraph& g, Rng& rng);

}  // namespace sgdiff
