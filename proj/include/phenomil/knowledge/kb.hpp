#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "phenomil/core/error.hpp"

namespace phenomil {

/// One histomorphological phenotype: name, morphology description and the
/// associated gene set (ordered, unique symbols).
struct Phenotype {
  std::string name;
  std::string description;
  std::vector<std::string> genes;

  bool operator==(const Phenotype&) const = default;
};

struct PhenotypeKB {
  std::string cancer;
  std::vector<Phenotype> phenotypes;

  std::size_t size() const noexcept { return phenotypes.size(); }

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < phenotypes.size(); ++i)
      if (phenotypes[i].name == name) return i;
    throw LookupError("phenotype '" + name + "' not in knowledge base");
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& p : phenotypes) out.push_back(p.name);
    return out;
  }

  /// Union of all gene symbols in first-seen order.
  std::vector<std::string> all_genes() const {
    std::vector<std::string> out;
    std::set<std::string> seen;
    for (const auto& p : phenotypes)
      for (const auto& g : p.genes)
        if (seen.insert(g).second) out.push_back(g);
    return out;
  }

  bool operator==(const PhenotypeKB&) const = default;
};

/// Throws ValidationError naming the first offending phenotype.
inline void validate_kb(const PhenotypeKB& kb) {
  if (kb.phenotypes.size() < 2) {
    throw ValidationError("knowledge base needs at least 2 phenotypes, got " + std::to_string(kb.phenotypes.size()));
  }
  std::set<std::string> names;
  for (const auto& p : kb.phenotypes) {
    if (p.name.empty()) throw ValidationError("phenotype with empty name");
    if (!names.insert(p.name).second) throw ValidationError("duplicate phenotype name '" + p.name + "'");
    if (p.genes.empty()) throw ValidationError("phenotype '" + p.name + "' has an empty gene set");
    std::set<std::string> genes;
    for (const auto& g : p.genes) {
      if (g.empty()) throw ValidationError("phenotype '" + p.name + "' has an empty gene symbol");
      if (!genes.insert(g).second) throw ValidationError("phenotype '" + p.name + "' lists gene '" + g + "' twice");
    }
  }
}

namespace detail {

inline std::size_t line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

inline PhenotypeKB parse_kb(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.what(), detail::line_of_offset(text, e.byte == 0 ? 0 : e.byte - 1));
  }
  PhenotypeKB kb;
  try {
    kb.cancer = doc.at("cancer").get<std::string>();
    for (const auto& item : doc.at("phenotypes")) {
      Phenotype p;
      p.name = item.at("name").get<std::string>();
      p.description = item.value("description", std::string{});
      p.genes = item.at("genes").get<std::vector<std::string>>();
      kb.phenotypes.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("knowledge base schema: ") + e.what(), 1);
  }
  validate_kb(kb);
  return kb;
}

inline PhenotypeKB load_kb(const std::string& path) { return parse_kb(detail::read_text_file(path)); }

inline std::string kb_to_json(const PhenotypeKB& kb) {
  nlohmann::ordered_json doc;
  doc["cancer"] = kb.cancer;
  doc["phenotypes"] = nlohmann::ordered_json::array();
  for (const auto& p : kb.phenotypes) {
    doc["phenotypes"].push_back({{"name", p.name}, {"description", p.description}, {"genes", p.genes}});
  }
  return doc.dump(2) + "\n";
}

inline void save_kb(const PhenotypeKB& kb, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << kb_to_json(kb);
}

}  // namespace phenomil
