#include "canonical_json.hpp"

#include <cstdio>

namespace klora::detail {

namespace {

bool is_scalar(const nlohmann::json& v) {
    return !v.is_array() && !v.is_object();
}

bool inline_array(const nlohmann::json& v) {
    for (const auto& e : v) {
        if (e.is_object()) return false;
        if (e.is_array()) {
            for (const auto& inner : e) {
                if (!is_scalar(inner)) return false;
            }
        }
    }
    return true;
}

void format_double(double d, std::string& out) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", d);
    std::string s(buf);
    if (s.find_first_of(".en") == std::string::npos) s += ".0";
    out += s;
}

void dump(const nlohmann::json& v, int indent, std::string& out) {
    const std::string pad(static_cast<std::size_t>(indent) * 2, ' ');
    const std::string inner_pad(static_cast<std::size_t>(indent + 1) * 2, ' ');
    switch (v.type()) {
    case nlohmann::json::value_t::object: {
        if (v.empty()) {
            out += "{}";
            return;
        }
        out += "{\n";
        bool first = true;
        for (const auto& [key, val] : v.items()) {
            if (!first) out += ",\n";
            first = false;
            out += inner_pad + nlohmann::json(key).dump() + ": ";
            dump(val, indent + 1, out);
        }
        out += "\n" + pad + "}";
        return;
    }
    case nlohmann::json::value_t::array: {
        if (v.empty()) {
            out += "[]";
            return;
        }
        if (inline_array(v)) {
            out += "[";
            bool first = true;
            for (const auto& e : v) {
                if (!first) out += ", ";
                first = false;
                dump(e, indent, out);
            }
            out += "]";
            return;
        }
        out += "[\n";
        bool first = true;
        for (const auto& e : v) {
            if (!first) out += ",\n";
            first = false;
            out += inner_pad;
            dump(e, indent + 1, out);
        }
        out += "\n" + pad + "]";
        return;
    }
    case nlohmann::json::value_t::number_float:
        format_double(v.get<double>(), out);
        return;
    default:
        out += v.dump();
        return;
    }
}

}  // namespace

std::string canonical_dump(const nlohmann::json& value) {
    std::string out;
    dump(value, 0, out);
    out += "\n";
    return out;
}

}  // namespace klora::detail
