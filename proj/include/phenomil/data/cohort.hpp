#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenomil/core/error.hpp"
#include "phenomil/data/bag.hpp"
#include "phenomil/data/transcriptome.hpp"

namespace phenomil {

struct Cohort {
  std::vector<FeatureBag> bags;
  std::vector<TranscriptomeProfile> profiles;  // empty, or aligned 1:1 with bags
  std::vector<std::string> class_names;
  std::string kb_name;  // cancer identifier of the KB the cohort was built against

  std::size_t size() const noexcept { return bags.size(); }
  std::size_t num_classes() const noexcept { return class_names.size(); }
  bool has_profiles() const noexcept { return !profiles.empty(); }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(bags.size());
    for (const auto& b : bags) out.push_back(b.label);
    return out;
  }

  std::vector<std::size_t> all_indices() const {
    std::vector<std::size_t> idx(bags.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }

  bool operator==(const Cohort&) const = default;
};

inline void validate_cohort(const Cohort& c) {
  if (c.class_names.empty()) throw ValidationError("cohort has no class names");
  for (const auto& b : c.bags) {
    if (b.label >= c.class_names.size()) {
      throw ValidationError("sample '" + b.sample_id + "' label " + std::to_string(b.label) + " >= class count");
    }
  }
  if (!c.profiles.empty()) {
    if (c.profiles.size() != c.bags.size()) throw ValidationError("profiles do not align with bags");
    for (std::size_t i = 0; i < c.bags.size(); ++i) {
      if (c.profiles[i].sample_id != c.bags[i].sample_id) {
        throw ValidationError("profile '" + c.profiles[i].sample_id + "' misaligned with bag '" + c.bags[i].sample_id + "'");
      }
    }
  }
}

/// Cohort manifest on disk (JSON). Paths are relative to the manifest file.
struct CohortManifest {
  std::vector<std::string> class_names;
  std::string kb_path;
  std::string embeddings_path;
  std::string kb_name;
  struct Entry {
    std::string id;
    std::string bag;
    std::string profile;  // empty when the cohort has no transcriptomes
  };
  std::vector<Entry> samples;
};

inline void write_cohort_manifest(const CohortManifest& m, const std::string& path) {
  nlohmann::ordered_json doc;
  doc["kb_name"] = m.kb_name;
  doc["kb"] = m.kb_path;
  doc["embeddings"] = m.embeddings_path;
  doc["class_names"] = m.class_names;
  doc["samples"] = nlohmann::ordered_json::array();
  for (const auto& e : m.samples) {
    nlohmann::ordered_json s{{"id", e.id}, {"bag", e.bag}};
    if (!e.profile.empty()) s["profile"] = e.profile;
    doc["samples"].push_back(std::move(s));
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path + "'");
  out << doc.dump(2) << "\n";
}

inline CohortManifest read_cohort_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open cohort manifest '" + path + "'");
  CohortManifest m;
  try {
    const auto doc = nlohmann::json::parse(in);
    m.kb_name = doc.value("kb_name", std::string{});
    m.kb_path = doc.value("kb", std::string{});
    m.embeddings_path = doc.value("embeddings", std::string{});
    m.class_names = doc.at("class_names").get<std::vector<std::string>>();
    for (const auto& s : doc.at("samples")) {
      m.samples.push_back({s.at("id").get<std::string>(), s.at("bag").get<std::string>(), s.value("profile", std::string{})});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("cohort manifest '" + path + "': " + e.what());
  }
  return m;
}

inline std::string resolve_relative(const std::string& base_file, const std::string& rel) {
  if (rel.empty()) return rel;
  const std::filesystem::path p(rel);
  if (p.is_absolute()) return rel;
  return (std::filesystem::path(base_file).parent_path() / p).string();
}

inline Cohort load_cohort(const std::string& manifest_path) {
  const auto m = read_cohort_manifest(manifest_path);
  Cohort c;
  c.class_names = m.class_names;
  c.kb_name = m.kb_name;
  bool any_profile = false;
  for (const auto& e : m.samples) any_profile = any_profile || !e.profile.empty();
  for (const auto& e : m.samples) {
    auto bag = read_bag(resolve_relative(manifest_path, e.bag));
    if (bag.sample_id != e.id) throw DataError("bag file for '" + e.id + "' carries id '" + bag.sample_id + "'");
    c.bags.push_back(std::move(bag));
    if (any_profile) {
      if (e.profile.empty()) throw DataError("sample '" + e.id + "' has no profile while others do");
      c.profiles.push_back(read_profile(resolve_relative(manifest_path, e.profile)));
    }
  }
  validate_cohort(c);
  return c;
}

/// Restricts a cohort to the given sample indices (order preserved).
inline Cohort subset(const Cohort& c, const std::vector<std::size_t>& idx) {
  Cohort out;
  out.class_names = c.class_names;
  out.kb_name = c.kb_name;
  for (auto i : idx) {
    out.bags.push_back(c.bags.at(i));
    if (c.has_profiles()) out.profiles.push_back(c.profiles.at(i));
  }
  return out;
}

}  // namespace phenomil
