#include "kdlt/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>

#include "kdlt/errors.hpp"

namespace kdlt::cli {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
    T value{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size()) {
        throw ConfigError("malformed value '" + std::string(text) + "' for key '" + std::string(key) + "'");
    }
    return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError("malformed value '" + std::string(text) + "' for key '" + std::string(key) +
                      "' (expected true or false)");
}

std::string show(double v) {
    char buf[32];
    return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

struct Field {
    const char* key;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

// `slot` maps any (const) RunConfig to the field it names.
template <typename Slot>
Field numeric(const char* key, Slot slot) {
    return {key,
            [=](RunConfig& c, std::string_view v) {
                auto& target = slot(c);
                target = parse_number<std::remove_reference_t<decltype(target)>>(key, v);
            },
            [=](const RunConfig& c) {
                const auto value = slot(c);
                if constexpr (std::is_floating_point_v<decltype(value)>) return show(value);
                else return std::to_string(value);
            }};
}

#define KDLT_SLOT(expr) [](auto& c) -> auto& { return c.expr; }

Field flag(const char* key, bool harness::LossFlags::*member) {
    return {key, [=](RunConfig& c, std::string_view v) { c.train.enabled.*member = parse_bool(key, v); },
            [=](const RunConfig& c) { return std::string(c.train.enabled.*member ? "true" : "false"); }};
}

Field toggle(const char* key, bool harness::TrainConfig::*member) {
    return {key, [=](RunConfig& c, std::string_view v) { c.train.*member = parse_bool(key, v); },
            [=](const RunConfig& c) { return std::string(c.train.*member ? "true" : "false"); }};
}

Field path(const char* key, std::string RunConfig::*member) {
    return {key, [=](RunConfig& c, std::string_view v) { c.*member = std::string(v); },
            [=](const RunConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table{
        numeric("epochs", KDLT_SLOT(train.epochs)),
        numeric("batch_size", KDLT_SLOT(train.batch_size)),
        numeric("learning_rate", KDLT_SLOT(train.learning_rate)),
        numeric("lr_decay", KDLT_SLOT(train.lr_decay)),
        numeric("lr_decay_every", KDLT_SLOT(train.lr_decay_every)),
        numeric("seed", KDLT_SLOT(train.seed)),
        toggle("student_from_teacher", &harness::TrainConfig::student_from_teacher),
        numeric("lambda1", KDLT_SLOT(train.weights.lambda1)),
        numeric("lambda2", KDLT_SLOT(train.weights.lambda2)),
        numeric("lambda3", KDLT_SLOT(train.weights.lambda3)),
        numeric("lambda4", KDLT_SLOT(train.weights.lambda4)),
        numeric("tau_semantic", KDLT_SLOT(train.weights.tau_semantic)),
        numeric("tau_logits", KDLT_SLOT(train.weights.tau_logits)),
        numeric("alpha", KDLT_SLOT(train.weights.alpha)),
        numeric("beam_k", KDLT_SLOT(train.weights.beam_k)),
        numeric("threshold_r", KDLT_SLOT(train.weights.threshold_r)),
        flag("loss_visual", &harness::LossFlags::visual),
        flag("loss_semantic", &harness::LossFlags::semantic),
        flag("loss_logits", &harness::LossFlags::logits),
        path("train_data", &RunConfig::train_data),
        path("test_data", &RunConfig::test_data),
        path("teacher", &RunConfig::teacher),
    };
    return table;
}

#undef KDLT_SLOT

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.emplace_back(f.key);
    return keys;
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
    for (const auto& f : fields()) {
        if (key == f.key) {
            f.set(config, trim(value));
            return;
        }
    }
    throw ConfigError("unknown config key '" + std::string(key) + "'");
}

RunConfig parse_config_text(std::string_view text, const std::string& origin, RunConfig base) {
    int line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(line_no) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string_view key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(where + "missing key before '='");
        try {
            apply_setting(base, key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return base;
}

RunConfig parse_config_file(const std::filesystem::path& path, RunConfig base) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path.string());
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_config_text(text, path.string(), std::move(base));
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
    for (const auto& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + a + "' is not key=value");
        apply_setting(config, trim(std::string_view(a).substr(0, eq)), std::string_view(a).substr(eq + 1));
    }
}

std::string format_config(const RunConfig& config) {
    std::ostringstream out;
    for (const auto& f : fields()) out << f.key << " = " << f.get(config) << '\n';
    return out.str();
}

}  // namespace kdlt::cli
