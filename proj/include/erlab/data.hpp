#pragma once

#include <fstream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

namespace erlab::data {

struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> chosen;    // y_w
  std::vector<int> rejected;  // y_l

  void validate() const {
    if (prompt.empty() || chosen.empty() || rejected.empty())
      throw std::invalid_argument("preference pair: all sequences must be nonempty");
    if (chosen == rejected)
      throw std::invalid_argument("preference pair: chosen and rejected are identical");
  }

  bool operator==(const PreferencePair&) const = default;
};

struct PreferenceSplits {
  std::vector<PreferencePair> phase1;
  std::vector<PreferencePair> phase2;
  std::vector<PreferencePair> heldout;
};

// One JSON object per line with integer-array fields prompt/chosen/rejected.
inline void save_jsonl(const std::string& path, std::span<const PreferencePair> pairs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dataset: cannot open for writing: " + path);
  for (const auto& p : pairs) {
    nlohmann::json j;
    j["prompt"] = p.prompt;
    j["chosen"] = p.chosen;
    j["rejected"] = p.rejected;
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

inline std::vector<PreferencePair> load_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open: " + path);
  std::vector<PreferencePair> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("dataset: parse error at " + path + ":" + std::to_string(lineno) +
                               ": " + e.what());
    }
    PreferencePair p;
    p.prompt = j.at("prompt").get<std::vector<int>>();
    p.chosen = j.at("chosen").get<std::vector<int>>();
    p.rejected = j.at("rejected").get<std::vector<int>>();
    p.validate();
    out.push_back(std::move(p));
  }
  return out;
}

namespace detail {

inline std::string pair_key(const PreferencePair& p) {
  std::string key;
  auto append = [&key](const std::vector<int>& v) {
    for (int x : v) {
      key += std::to_string(x);
      key += ',';
    }
    key += '|';
  };
  append(p.prompt);
  append(p.chosen);
  append(p.rejected);
  return key;
}

}  // namespace detail

inline bool disjoint(std::span<const PreferencePair> a, std::span<const PreferencePair> b) {
  std::unordered_set<std::string> keys;
  keys.reserve(a.size());
  for (const auto& p : a) keys.insert(detail::pair_key(p));
  for (const auto& p : b)
    if (keys.count(detail::pair_key(p))) return false;
  return true;
}

}  // namespace erlab::data
