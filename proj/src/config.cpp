#include "sgdiff/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "sgdiff/scenegraph.hpp"

namespace sgdiff {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
    KvConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        lineno++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            fail_config("config line ", lineno, " has no '=': '", t, "'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) fail_config("config line ", lineno, " has an empty key");
        if (cfg.kv_.count(key)) fail_config("duplicate config key '", key, "'");
        cfg.kv_.emplace(std::move(key), std::move(value));
    }
    return cfg;
}

KvConfig KvConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_text(text);
}

std::string KvConfig::get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
}

int64_t KvConfig::get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& s = it->second;
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        fail_config("config key '", key, "': '", s, "' is not an integer");
    return v;
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& s = it->second;
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
        fail_config("config key '", key, "': '", s, "' is not an unsigned integer");
    return v;
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& s = it->second;
    try {
        size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        fail_config("config key '", key, "': '", s, "' is not a number");
    }
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& s = it->second;
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    fail_config("config key '", key, "': '", s, "' is not a boolean (0/1/true/false)");
}

std::string KvConfig::canonical() const {
    std::string out;
    for (const auto& [k, v] : kv_) {
        out += k;
        out += '=';
        out += v;
        out += '\n';
    }
    return out;
}

Experiment experiment_from_string(std::string_view name) {
    if (name == "baseline-seq") return Experiment::kBaselineSeq;
    if (name == "lora-triple") return Experiment::kLoraTriple;
    if (name == "layout-controlnet") return Experiment::kLayoutControlnet;
    if (name == "gsa-embed") return Experiment::kGsaEmbed;
    if (name == "gsa-triple") return Experiment::kGsaTriple;
    fail_config("unknown experiment '", name,
                "' (want baseline-seq|lora-triple|layout-controlnet|gsa-embed|gsa-triple)");
}

std::string experiment_name(Experiment e) {
    switch (e) {
        case Experiment::kBaselineSeq: return "baseline-seq";
        case Experiment::kLoraTriple: return "lora-triple";
        case Experiment::kLayoutControlnet: return "layout-controlnet";
        case Experiment::kGsaEmbed: return "gsa-embed";
        case Experiment::kGsaTriple: return "gsa-triple";
    }
    fail_config("corrupt experiment value");
}

namespace {

std::vector<int64_t> parse_widths(const std::string& s) {
    std::vector<int64_t> out;
    std::string cur;
    for (char c : s + ",") {
        if (c == ',') {
            if (cur.empty()) fail_config("widths '", s, "': empty element");
            int64_t v = 0;
            auto [p, ec] = std::from_chars(cur.data(), cur.data() + cur.size(), v);
            if (ec != std::errc() || p != cur.data() + cur.size())
                fail_config("widths '", s, "': '", cur, "' is not an integer");
            out.push_back(v);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    return out;
}

std::string widths_str(const std::vector<int64_t>& w) {
    std::string s;
    for (size_t i = 0; i < w.size(); i++) s += (i ? "," : "") + std::to_string(w[i]);
    return s;
}

// Shortest decimal form that parses back to the same double, so canonical
// text (and with it the config hash) survives a save/load round trip.
std::string double_str(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    SGDIFF_CHECK(ec == std::errc(), "double_str: value does not format");
    return std::string(buf, p);
}

const char* const kKnownKeys[] = {
    "epochs",      "classifier_epochs", "layout_epochs", "contrastive_epochs",
    "adapter_epochs", "batch",          "lr",            "seed",
    "schedule",    "timesteps",         "cfg_dropout",   "widths",
    "res_blocks",  "max_items",         "init_ckpt",
};

}  // namespace

TrainConfig TrainConfig::from_kv(const KvConfig& kv, Experiment experiment,
                                 const std::string& data_dir) {
    for (const auto& [k, v] : kv.entries()) {
        bool known = false;
        for (const char* known_key : kKnownKeys) known = known || k == known_key;
        if (!known) fail_config("unknown config key '", k, "'");
    }

    TrainConfig c;
    c.experiment = experiment;
    c.data_dir = data_dir;
    c.epochs = kv.get_int("epochs", c.epochs);
    c.classifier_epochs = kv.get_int("classifier_epochs", c.classifier_epochs);
    c.layout_epochs = kv.get_int("layout_epochs", c.layout_epochs);
    c.contrastive_epochs = kv.get_int("contrastive_epochs", c.contrastive_epochs);
    c.adapter_epochs = kv.get_int("adapter_epochs", c.adapter_epochs);
    c.batch = kv.get_int("batch", c.batch);
    c.lr = kv.get_double("lr", c.lr);
    c.seed = kv.get_u64("seed", c.seed);
    c.schedule_kind = schedule_kind_from_string(
        kv.get_str("schedule", schedule_kind_name(c.schedule_kind)));
    c.timesteps = kv.get_int("timesteps", c.timesteps);
    c.cfg_dropout = kv.get_double("cfg_dropout", c.cfg_dropout);
    c.widths = parse_widths(kv.get_str("widths", widths_str(c.widths)));
    c.res_blocks = kv.get_int("res_blocks", c.res_blocks);
    c.max_items = kv.get_int("max_items", c.max_items);
    c.init_ckpt = kv.get_str("init_ckpt", c.init_ckpt);
    c.validate();
    return c;
}

TrainConfig TrainConfig::from_meta(const KvConfig& kv) {
    if (!kv.has("experiment")) fail_config("meta config is missing the experiment key");
    TrainConfig c;
    c.experiment = experiment_from_string(kv.get_str("experiment", ""));
    c.epochs = kv.get_int("epochs", c.epochs);
    c.classifier_epochs = kv.get_int("classifier_epochs", c.classifier_epochs);
    c.layout_epochs = kv.get_int("layout_epochs", c.layout_epochs);
    c.contrastive_epochs = kv.get_int("contrastive_epochs", c.contrastive_epochs);
    c.adapter_epochs = kv.get_int("adapter_epochs", c.adapter_epochs);
    c.batch = kv.get_int("batch", c.batch);
    c.lr = kv.get_double("lr", c.lr);
    c.seed = kv.get_u64("seed", c.seed);
    c.schedule_kind = schedule_kind_from_string(
        kv.get_str("schedule", schedule_kind_name(c.schedule_kind)));
    c.timesteps = kv.get_int("timesteps", c.timesteps);
    c.cfg_dropout = kv.get_double("cfg_dropout", c.cfg_dropout);
    c.widths = parse_widths(kv.get_str("widths", widths_str(c.widths)));
    c.res_blocks = kv.get_int("res_blocks", c.res_blocks);
    c.max_items = kv.get_int("max_items", c.max_items);
    uint64_t vh = kv.get_u64("vocab_hash", 0);
    uint64_t want = Vocab::shape_world().hash();
    if (vh != want)
        fail_config("checkpoint was written for vocabulary hash ", vh, ", this build uses ",
                    want);
    return c;
}

KvConfig TrainConfig::to_kv() const {
    KvConfig kv;
    kv.set("experiment", experiment_name(experiment));
    kv.set("epochs", std::to_string(epochs));
    kv.set("classifier_epochs", std::to_string(classifier_epochs));
    kv.set("layout_epochs", std::to_string(layout_epochs));
    kv.set("contrastive_epochs", std::to_string(contrastive_epochs));
    kv.set("adapter_epochs", std::to_string(adapter_epochs));
    kv.set("batch", std::to_string(batch));
    kv.set("lr", double_str(lr));
    kv.set("seed", std::to_string(seed));
    kv.set("schedule", schedule_kind_name(schedule_kind));
    kv.set("timesteps", std::to_string(timesteps));
    kv.set("cfg_dropout", double_str(cfg_dropout));
    kv.set("widths", widths_str(widths));
    kv.set("res_blocks", std::to_string(res_blocks));
    kv.set("max_items", std::to_string(max_items));
    kv.set("vocab_hash", std::to_string(Vocab::shape_world().hash()));
    return kv;
}

UNetConfig TrainConfig::unet() const {
    UNetConfig u;
    u.widths = widths;
    u.res_blocks = res_blocks;
    return u;
}

void TrainConfig::validate() const {
    if (data_dir.empty()) fail_config("data_dir is required");
    auto nonneg = [](const char* what, int64_t v) {
        if (v < 0) fail_config(what, " = ", v, " must be >= 0");
    };
    nonneg("epochs", epochs);
    nonneg("classifier_epochs", classifier_epochs);
    nonneg("layout_epochs", layout_epochs);
    nonneg("contrastive_epochs", contrastive_epochs);
    nonneg("adapter_epochs", adapter_epochs);
    nonneg("max_items", max_items);
    if (init_ckpt.empty() && epochs < 1 && (wants_adapter() && adapter_epochs > 0))
        fail_config("adapter training without a base: set epochs >= 1 or init_ckpt");
    if (batch < 1) fail_config("batch = ", batch, " must be >= 1");
    if (!(lr > 0)) fail_config("lr = ", lr, " must be > 0");
    if (timesteps < 1) fail_config("timesteps = ", timesteps, " must be >= 1");
    if (!(cfg_dropout >= 0 && cfg_dropout < 1))
        fail_config("cfg_dropout = ", cfg_dropout, " outside [0, 1)");
    if (widths.empty()) fail_config("widths must name at least one level");
    UNetConfig u = unet();
    for (int64_t w : widths) {
        if (w < 1) fail_config("width ", w, " must be >= 1");
        if (w % u.groups != 0)
            fail_config("width ", w, " not divisible by the ", u.groups, " norm groups");
    }
    if (res_blocks < 1) fail_config("res_blocks = ", res_blocks, " must be >= 1");
    if (u.side_at(u.levels() - 1) < 1)
        fail_config(widths.size(), " levels are too many for ", u.image_size, "-pixel images");
}

}  // namespace sgdiff
