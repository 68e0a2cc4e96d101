#include "sgdiff/scenegraph.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <tuple>

namespace sgdiff {

using nlohmann::json;

const SgObject& SceneGraph::object_by_id(int64_t id) const {
    for (const auto& o : objects)
        if (o.id == id) return o;
    throw LookupError("no object with id " + std::to_string(id));
}

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    SGDIFF_CHECK(tokens_.size() >= 2, "vocabulary needs at least PAD and the null token");
    SGDIFF_CHECK(tokens_[kPad] == kPadToken, "vocabulary index 0 must be '", kPadToken, "'");
    SGDIFF_CHECK(tokens_[kNull] == kNullToken, "vocabulary index 1 must be '", kNullToken, "'");
    for (size_t i = 0; i < tokens_.size(); i++) index_.push_back({tokens_[i], (int64_t)i});
    std::sort(index_.begin(), index_.end());
    for (size_t i = 1; i < index_.size(); i++)
        SGDIFF_CHECK(index_[i - 1].first != index_[i].first, "duplicate vocabulary token '",
                     index_[i].first, "'");
    std::string joined;
    for (const auto& t : tokens_) {
        joined += t;
        joined += '\n';
    }
    hash_ = fnv1a(joined);
}

const Vocab& Vocab::shape_world() {
    static const Vocab v(std::vector<std::string>{
        kPadToken, kNullToken,
        // categories
        "circle", "square", "triangle", "diamond",
        // colors
        "red", "green", "blue", "yellow", "purple", "cyan",
        // sizes
        "small", "large",
        // predicates
        "left of", "right of", "above", "below", "inside", "surrounding"});
    return v;
}

bool Vocab::contains(const std::string& token) const {
    auto it = std::lower_bound(index_.begin(), index_.end(), std::pair(token, (int64_t)0));
    return it != index_.end() && it->first == token;
}

int64_t Vocab::id(const std::string& token) const {
    auto it = std::lower_bound(index_.begin(), index_.end(), std::pair(token, (int64_t)0));
    if (it == index_.end() || it->first != token)
        throw LookupError("token '" + token + "' not in vocabulary");
    return it->second;
}

const std::string& Vocab::token(int64_t id) const {
    SGDIFF_CHECK(id >= 0 && id < size(), "token id ", id, " outside vocabulary of ", size());
    return tokens_[static_cast<size_t>(id)];
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

namespace {

// Byte offset -> (line, column), both 1-based.
std::pair<int, int> offset_to_line_col(const std::string& text, size_t offset) {
    int line = 1, col = 1;
    for (size_t i = 0; i < offset && i < text.size(); i++) {
        if (text[i] == '\n') {
            line++;
            col = 1;
        } else {
            col++;
        }
    }
    return {line, col};
}

[[noreturn]] void fail_syntax(const std::string& msg) {
    throw GraphParseError(GraphErrorKind::kSyntax, msg);
}

void reject_unknown_fields(const json& j, const std::set<std::string>& allowed,
                           const char* where) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            fail_syntax(std::string("unknown field '") + it.key() + "' in " + where);
}

std::string get_string(const json& j, const char* key, const char* where) {
    if (!j.contains(key)) fail_syntax(std::string(where) + " missing field '" + key + "'");
    if (!j[key].is_string()) fail_syntax(std::string(where) + " field '" + key + "' must be a string");
    return j[key].get<std::string>();
}

int64_t get_int(const json& j, const char* key, const char* where) {
    if (!j.contains(key)) fail_syntax(std::string(where) + " missing field '" + key + "'");
    if (!j[key].is_number_integer())
        fail_syntax(std::string(where) + " field '" + key + "' must be an integer");
    return j[key].get<int64_t>();
}

std::vector<std::string> get_string_array(const json& j, const char* key, const char* where) {
    if (!j.contains(key)) fail_syntax(std::string(where) + " missing field '" + key + "'");
    if (!j[key].is_array()) fail_syntax(std::string(where) + " field '" + key + "' must be an array");
    std::vector<std::string> out;
    for (const auto& e : j[key]) {
        if (!e.is_string()) fail_syntax(std::string(where) + " '" + key + "' entries must be strings");
        out.push_back(e.get<std::string>());
    }
    return out;
}

void check_token(const std::string& token, const Vocab& vocab, const char* role) {
    if (!vocab.contains(token))
        throw GraphParseError(GraphErrorKind::kUnknownToken,
                              std::string("unknown ") + role + " token '" + token + "'");
}

}  // namespace

SceneGraph parse_scene_graph(const std::string& text, const Vocab& vocab) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        auto [line, col] = offset_to_line_col(text, e.byte > 0 ? e.byte - 1 : 0);
        throw GraphParseError(GraphErrorKind::kSyntax, e.what(), line, col);
    }
    if (!doc.is_object()) fail_syntax("document root must be an object");
    reject_unknown_fields(doc, {"objects", "relations"}, "document");
    if (!doc.contains("objects") || !doc["objects"].is_array())
        fail_syntax("document needs an 'objects' array");
    if (!doc.contains("relations") || !doc["relations"].is_array())
        fail_syntax("document needs a 'relations' array");

    // Name-keyed variant detection: any object carrying "name".
    bool named = false;
    for (const auto& jo : doc["objects"])
        if (jo.is_object() && jo.contains("name")) named = true;

    SceneGraph g;
    std::map<std::string, int64_t> name_to_id;
    std::set<int64_t> ids;
    for (const auto& jo : doc["objects"]) {
        if (!jo.is_object()) fail_syntax("object entries must be objects");
        SgObject obj;
        if (named) {
            reject_unknown_fields(jo, {"name", "attributes"}, "object");
            obj.category = get_string(jo, "name", "object");
            obj.id = static_cast<int64_t>(g.objects.size());
            obj.attributes = jo.contains("attributes")
                                 ? get_string_array(jo, "attributes", "object")
                                 : std::vector<std::string>{};
            if (name_to_id.count(obj.category))
                fail_syntax("object name '" + obj.category + "' is not unique");
            name_to_id[obj.category] = obj.id;
        } else {
            reject_unknown_fields(jo, {"id", "category", "attributes"}, "object");
            obj.id = get_int(jo, "id", "object");
            if (obj.id < 0) fail_syntax("object ids must be non-negative");
            obj.category = get_string(jo, "category", "object");
            obj.attributes = get_string_array(jo, "attributes", "object");
        }
        check_token(obj.category, vocab, "category");
        for (const auto& a : obj.attributes) check_token(a, vocab, "attribute");
        if (ids.count(obj.id))
            throw GraphParseError(GraphErrorKind::kDuplicateId,
                                  "duplicate object id " + std::to_string(obj.id));
        ids.insert(obj.id);
        g.objects.push_back(std::move(obj));
    }

    std::set<std::pair<int64_t, int64_t>> seen_pairs;
    for (const auto& jr : doc["relations"]) {
        if (!jr.is_object()) fail_syntax("relation entries must be objects");
        reject_unknown_fields(jr, {"s", "p", "o"}, "relation");
        SgRelation rel;
        rel.predicate = get_string(jr, "p", "relation");
        check_token(rel.predicate, vocab, "predicate");
        auto endpoint = [&](const char* key) -> int64_t {
            if (named) {
                std::string name = get_string(jr, key, "relation");
                auto it = name_to_id.find(name);
                if (it == name_to_id.end())
                    throw GraphParseError(GraphErrorKind::kDanglingEndpoint,
                                          "relation references unknown object '" + name + "'");
                return it->second;
            }
            int64_t id = get_int(jr, key, "relation");
            if (!ids.count(id))
                throw GraphParseError(GraphErrorKind::kDanglingEndpoint,
                                      "relation references missing object id " + std::to_string(id));
            return id;
        };
        rel.subject = endpoint("s");
        rel.object = endpoint("o");
        if (rel.subject == rel.object)
            throw GraphParseError(GraphErrorKind::kInvalidRelation,
                                  "self-loop relation on object " + std::to_string(rel.subject));
        // (s, o) determines p under the geometric rules, so dedupe on the pair
        // and on exact triples alike.
        for (const auto& prev : g.relations)
            if (prev.subject == rel.subject && prev.predicate == rel.predicate &&
                prev.object == rel.object)
                throw GraphParseError(GraphErrorKind::kInvalidRelation,
                                      "duplicate relation triple");
        seen_pairs.insert({rel.subject, rel.object});
        g.relations.push_back(std::move(rel));
    }
    return g;
}

std::string serialize_scene_graph(const SceneGraph& g) {
    json jo = json::array();
    for (const auto& o : g.objects) {
        json attrs = json::array();
        for (const auto& a : o.attributes) attrs.push_back(a);
        jo.push_back({{"id", o.id}, {"category", o.category}, {"attributes", attrs}});
    }
    json jr = json::array();
    for (const auto& r : g.relations)
        jr.push_back({{"s", r.subject}, {"p", r.predicate}, {"o", r.object}});
    json doc{{"objects", jo}, {"relations", jr}};
    return doc.dump();
}

std::vector<std::string> validate(const SceneGraph& g, const Vocab& vocab) {
    std::vector<std::string> out;
    std::set<int64_t> ids;
    for (const auto& o : g.objects) {
        if (o.id < 0) out.push_back("object id " + std::to_string(o.id) + " is negative");
        if (ids.count(o.id)) out.push_back("duplicate object id " + std::to_string(o.id));
        ids.insert(o.id);
        if (!vocab.contains(o.category))
            out.push_back("unknown category token '" + o.category + "'");
        for (const auto& a : o.attributes)
            if (!vocab.contains(a)) out.push_back("unknown attribute token '" + a + "'");
    }
    std::set<std::tuple<int64_t, std::string, int64_t>> triples;
    for (const auto& r : g.relations) {
        if (!ids.count(r.subject))
            out.push_back("relation subject " + std::to_string(r.subject) + " is dangling");
        if (!ids.count(r.object))
            out.push_back("relation object " + std::to_string(r.object) + " is dangling");
        if (r.subject == r.object)
            out.push_back("self-loop relation on object " + std::to_string(r.subject));
        if (!vocab.contains(r.predicate))
            out.push_back("unknown predicate token '" + r.predicate + "'");
        auto key = std::tuple(r.subject, r.predicate, r.object);
        if (triples.count(key)) out.push_back("duplicate relation triple");
        triples.insert(key);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linearization and triples
// ---------------------------------------------------------------------------

namespace {

// Objects by id; relations by (subject, object). The canonical order that
// makes linearize and extract_triples independent of stored list order.
std::vector<const SgObject*> sorted_objects(const SceneGraph& g) {
    std::vector<const SgObject*> objs;
    for (const auto& o : g.objects) objs.push_back(&o);
    std::sort(objs.begin(), objs.end(),
              [](const SgObject* a, const SgObject* b) { return a->id < b->id; });
    return objs;
}

std::vector<const SgRelation*> sorted_relations(const SceneGraph& g) {
    std::vector<const SgRelation*> rels;
    for (const auto& r : g.relations) rels.push_back(&r);
    std::sort(rels.begin(), rels.end(), [](const SgRelation* a, const SgRelation* b) {
        return std::tuple(a->subject, a->object) < std::tuple(b->subject, b->object);
    });
    return rels;
}

}  // namespace

std::vector<int64_t> linearize(const SceneGraph& g, const Vocab& vocab) {
    std::vector<int64_t> object_tokens;
    for (const SgObject* o : sorted_objects(g)) {
        for (const auto& a : o->attributes) object_tokens.push_back(vocab.id(a));
        object_tokens.push_back(vocab.id(o->category));
    }
    std::vector<std::array<int64_t, 3>> relation_tokens;
    for (const SgRelation* r : sorted_relations(g))
        relation_tokens.push_back({vocab.id(g.object_by_id(r->subject).category),
                                   vocab.id(r->predicate),
                                   vocab.id(g.object_by_id(r->object).category)});

    std::vector<int64_t> seq = object_tokens;
    // Whole relations are dropped from the end first; object tokens are only
    // cut if they alone exceed the budget.
    size_t keep = relation_tokens.size();
    while (keep > 0 && seq.size() + 3 * keep > kSeqLen) keep--;
    for (size_t i = 0; i < keep; i++)
        seq.insert(seq.end(), relation_tokens[i].begin(), relation_tokens[i].end());
    if ((int64_t)seq.size() > kSeqLen) seq.resize(kSeqLen);
    while ((int64_t)seq.size() < kSeqLen) seq.push_back(Vocab::kPad);
    return seq;
}

std::vector<Triple> extract_triples(const SceneGraph& g) {
    std::vector<Triple> out;
    for (const SgRelation* r : sorted_relations(g)) {
        const SgObject& s = g.object_by_id(r->subject);
        const SgObject& o = g.object_by_id(r->object);
        out.push_back({s.category, r->predicate, o.category, s.attributes, o.attributes});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Geometric predicates and synthetic graphs
// ---------------------------------------------------------------------------

std::optional<std::string> box_predicate(const std::array<double, 4>& a,
                                         const std::array<double, 4>& b) {
    auto area = [](const std::array<double, 4>& r) { return (r[2] - r[0]) * (r[3] - r[1]); };
    auto contains = [&](const std::array<double, 4>& outer, const std::array<double, 4>& inner) {
        return inner[0] >= outer[0] && inner[1] >= outer[1] && inner[2] <= outer[2] &&
               inner[3] <= outer[3] && area(inner) < area(outer);
    };
    if (contains(b, a)) return "inside";
    if (contains(a, b)) return "surrounding";
    double dx = (a[0] + a[2]) / 2 - (b[0] + b[2]) / 2;
    double dy = (a[1] + a[3]) / 2 - (b[1] + b[3]) / 2;
    if (dx == 0.0 && dy == 0.0) return std::nullopt;
    if (std::abs(dx) >= std::abs(dy)) return dx < 0 ? "left of" : "right of";
    return dy < 0 ? "above" : "below";
}

SceneGraph synth_graph_from_layout(const std::vector<std::array<double, 4>>& boxes,
                                   const std::vector<std::string>& categories,
                                   const std::vector<std::vector<std::string>>& attributes,
                                   Rng& rng) {
    size_t n = boxes.size();
    SGDIFF_CHECK(n >= 1, "synth_graph_from_layout needs at least one box");
    SGDIFF_CHECK(categories.size() == n && attributes.size() == n,
                 "boxes/categories/attributes length mismatch");
    for (const auto& b : boxes) {
        SGDIFF_CHECK(std::isfinite(b[0]) && std::isfinite(b[1]) && std::isfinite(b[2]) &&
                         std::isfinite(b[3]),
                     "non-finite box");
        SGDIFF_CHECK(b[0] < b[2] && b[1] < b[3], "degenerate box [", b[0], ",", b[1], ",", b[2],
                     ",", b[3], "]");
    }

    SceneGraph g;
    for (size_t i = 0; i < n; i++)
        g.objects.push_back({(int64_t)i, categories[i], attributes[i]});
    if (n < 2) return g;

    std::set<std::pair<int64_t, int64_t>> pairs;
    std::vector<bool> covered(n, false);
    auto try_add = [&](int64_t s, int64_t o) {
        if (s == o || pairs.count({s, o})) return false;
        auto pred = box_predicate(boxes[s], boxes[o]);
        if (!pred) return false;
        g.relations.push_back({s, *pred, o});
        pairs.insert({s, o});
        covered[s] = covered[o] = true;
        return true;
    };

    for (size_t i = 0; i < n; i++) {
        if (!covered[i]) {
            // walk partners from a random start so coverage relations vary
            auto start = (int64_t)rng.uniform_index(n);
            for (size_t k = 0; k < n; k++)
                if (try_add((int64_t)i, (start + (int64_t)k) % (int64_t)n)) break;
        }
        if (rng.uniform() < 0.5) try_add((int64_t)i, (int64_t)rng.uniform_index(n));
    }
    return g;
}

SceneGraph swap_hard_negative(const SceneGraph& g, Rng& rng) {
    struct Candidate {
        size_t obj_a, attr_a, obj_b, attr_b;
    };
    std::vector<Candidate> cands;
    auto has_attr = [&](size_t obj, const std::string& tok) {
        const auto& attrs = g.objects[obj].attributes;
        return std::find(attrs.begin(), attrs.end(), tok) != attrs.end();
    };
    for (size_t i = 0; i < g.objects.size(); i++)
        for (size_t j = i + 1; j < g.objects.size(); j++)
            for (size_t ai = 0; ai < g.objects[i].attributes.size(); ai++)
                for (size_t aj = 0; aj < g.objects[j].attributes.size(); aj++) {
                    const auto& ta = g.objects[i].attributes[ai];
                    const auto& tb = g.objects[j].attributes[aj];
                    // the exchange must change both objects and leave each
                    // attribute list duplicate-free
                    if (ta != tb && !has_attr(i, tb) && !has_attr(j, ta))
                        cands.push_back({i, ai, j, aj});
                }
    if (cands.empty())
        throw NoNegativeAvailable("no attribute pair differs between any two objects");
    const Candidate& c = cands[rng.uniform_index(cands.size())];
    SceneGraph out = g;
    std::swap(out.objects[c.obj_a].attributes[c.attr_a], out.objects[c.obj_b].attributes[c.attr_b]);
    return out;
}

}  // namespace sgdiff
