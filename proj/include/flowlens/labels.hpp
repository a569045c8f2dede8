// Copyright 2026 The flowlens Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "flowlens/flow.hpp"

// Label sidecar: a JSON document
//   { "default": "benign" | "malicious" | null,
//     "rules": [ { "label": "malicious", "attack": "flood",
//                  "src": "10.0.0.1", "dst": "10.0.0.2",
//                  "src_port": 1234, "dst_port": 80, "protocol": 6,
//                  "start": 12.5, "end": 13.0, "bidirectional": true } ] }
// Every rule field except "label" is optional. src/dst refer to the flow
// initiator/responder; "bidirectional" (default true) also accepts the
// reversed orientation. start/end bound the flow start time in seconds,
// inclusive. The first matching rule wins.

namespace flowlens {

struct LabelRule {
    Label label = Label::kBenign;
    std::string attack;
    std::optional<Address> src;
    std::optional<Address> dst;
    std::optional<std::uint16_t> src_port;
    std::optional<std::uint16_t> dst_port;
    std::optional<std::uint8_t> protocol;
    std::int64_t start_us = std::numeric_limits<std::int64_t>::min();
    std::int64_t end_us = std::numeric_limits<std::int64_t>::max();
    bool bidirectional = true;

    [[nodiscard]] bool fully_specified() const { return src && dst && src_port && dst_port && protocol; }

    [[nodiscard]] bool matches_oriented(const Endpoint& a, const Endpoint& b) const {
        return (!src || *src == a.addr) && (!dst || *dst == b.addr) && (!src_port || *src_port == a.port) &&
               (!dst_port || *dst_port == b.port);
    }

    [[nodiscard]] bool matches(const FlowKey& key, const Endpoint& initiator, const Endpoint& responder,
                               std::int64_t start) const {
        if (protocol && *protocol != key.protocol) {
            return false;
        }
        if (start < start_us || start > end_us) {
            return false;
        }
        return matches_oriented(initiator, responder) || (bidirectional && matches_oriented(responder, initiator));
    }
};

inline std::optional<Label> parse_label_name(const std::string& s) {
    if (s == "benign") {
        return Label::kBenign;
    }
    if (s == "malicious") {
        return Label::kMalicious;
    }
    throw std::invalid_argument("unknown label '" + s + "' (expected benign or malicious)");
}

inline std::int64_t seconds_to_us(double s) { return static_cast<std::int64_t>(std::llround(s * 1e6)); }

/// Rule set with an exact-5-tuple index so per-flow generator manifests stay
/// linear in the number of flows.
class LabelRules {
public:
    LabelRules() = default;

    explicit LabelRules(std::vector<LabelRule> rules, std::optional<Label> default_label = std::nullopt)
        : rules_(std::move(rules)), default_(default_label) {
        for (std::size_t i = 0; i < rules_.size(); ++i) {
            const auto& r = rules_[i];
            if (r.fully_specified()) {
                const FlowKey k = make_flow_key({*r.src, *r.src_port}, {*r.dst, *r.dst_port}, *r.protocol);
                indexed_[k].push_back(i);
            } else {
                unindexed_.push_back(i);
            }
        }
    }

    static LabelRules from_json(const nlohmann::json& j) {
        std::optional<Label> def;
        if (j.contains("default") && !j["default"].is_null()) {
            def = parse_label_name(j["default"].get<std::string>());
        }
        std::vector<LabelRule> rules;
        for (const auto& jr : j.value("rules", nlohmann::json::array())) {
            LabelRule r;
            r.label = *parse_label_name(jr.at("label").get<std::string>());
            r.attack = jr.value("attack", "");
            if (jr.contains("src")) {
                r.src = require_address(jr["src"].get<std::string>());
            }
            if (jr.contains("dst")) {
                r.dst = require_address(jr["dst"].get<std::string>());
            }
            if (jr.contains("src_port")) {
                r.src_port = jr["src_port"].get<std::uint16_t>();
            }
            if (jr.contains("dst_port")) {
                r.dst_port = jr["dst_port"].get<std::uint16_t>();
            }
            if (jr.contains("protocol")) {
                r.protocol = jr["protocol"].get<std::uint8_t>();
            }
            if (jr.contains("start")) {
                r.start_us = seconds_to_us(jr["start"].get<double>());
            }
            if (jr.contains("end")) {
                r.end_us = seconds_to_us(jr["end"].get<double>());
            }
            r.bidirectional = jr.value("bidirectional", true);
            rules.push_back(std::move(r));
        }
        return LabelRules(std::move(rules), def);
    }

    static LabelRules load(const std::filesystem::path& path) {
        std::ifstream is(path);
        if (!is) {
            throw std::runtime_error("cannot open label rules " + path.string());
        }
        return from_json(nlohmann::json::parse(is));
    }

    [[nodiscard]] nlohmann::json to_json() const {
        nlohmann::json j;
        j["default"] = default_ ? nlohmann::json(label_name(*default_)) : nlohmann::json(nullptr);
        auto arr = nlohmann::json::array();
        for (const auto& r : rules_) {
            nlohmann::json jr;
            jr["label"] = label_name(r.label);
            if (!r.attack.empty()) {
                jr["attack"] = r.attack;
            }
            if (r.src) {
                jr["src"] = format_address(*r.src);
            }
            if (r.dst) {
                jr["dst"] = format_address(*r.dst);
            }
            if (r.src_port) {
                jr["src_port"] = *r.src_port;
            }
            if (r.dst_port) {
                jr["dst_port"] = *r.dst_port;
            }
            if (r.protocol) {
                jr["protocol"] = *r.protocol;
            }
            if (r.start_us != std::numeric_limits<std::int64_t>::min()) {
                jr["start"] = static_cast<double>(r.start_us) * 1e-6;
            }
            if (r.end_us != std::numeric_limits<std::int64_t>::max()) {
                jr["end"] = static_cast<double>(r.end_us) * 1e-6;
            }
            if (!r.bidirectional) {
                jr["bidirectional"] = false;
            }
            arr.push_back(std::move(jr));
        }
        j["rules"] = std::move(arr);
        return j;
    }

    [[nodiscard]] LabelInfo lookup(const FlowKey& key, const Endpoint& initiator, const Endpoint& responder,
                                   std::int64_t start_us) const {
        std::size_t best = rules_.size();
        if (auto it = indexed_.find(key); it != indexed_.end()) {
            for (std::size_t i : it->second) {
                if (rules_[i].matches(key, initiator, responder, start_us)) {
                    best = std::min(best, i);
                    break;
                }
            }
        }
        for (std::size_t i : unindexed_) {
            if (i >= best) {
                break;
            }
            if (rules_[i].matches(key, initiator, responder, start_us)) {
                best = i;
                break;
            }
        }
        if (best < rules_.size()) {
            return {rules_[best].label, rules_[best].attack};
        }
        return {default_, {}};
    }

    [[nodiscard]] Labeler labeler() const {
        return [this](const FlowKey& k, const Endpoint& a, const Endpoint& b, std::int64_t t) {
            return lookup(k, a, b, t);
        };
    }

    [[nodiscard]] const std::vector<LabelRule>& rules() const { return rules_; }

private:
    static Address require_address(const std::string& s) {
        auto a = parse_address(s);
        if (!a) {
            throw std::invalid_argument("label rules: bad address '" + s + "'");
        }
        return *a;
    }

    std::vector<LabelRule> rules_;
    std::optional<Label> default_;
    std::unordered_map<FlowKey, std::vector<std::size_t>, FlowKeyHash> indexed_;
    std::vector<std::size_t> unindexed_;
};

}  // namespace flowlens
