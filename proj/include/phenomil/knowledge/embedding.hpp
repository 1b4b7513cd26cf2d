#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/error.hpp"
#include "phenomil/core/matrix.hpp"
#include "phenomil/core/rng.hpp"
#include "phenomil/knowledge/kb.hpp"

namespace phenomil {

/// Frozen phenotype text-feature provider. `pseudo` derives a unit vector
/// from a hash of the prompt string; `file_backed` reads precomputed
/// encoder outputs keyed by phenotype name.
struct EmbeddingSource {
  enum class Mode { kPseudo, kFileBacked };
  Mode mode = Mode::kPseudo;
  std::size_t dimension = 32;
  std::uint64_t seed = 0;
  std::string path;

  static EmbeddingSource pseudo(std::size_t d, std::uint64_t seed) { return {Mode::kPseudo, d, seed, {}}; }
  static EmbeddingSource file(std::string path, std::size_t d) { return {Mode::kFileBacked, d, 0, std::move(path)}; }
};

/// The text prompt for a phenotype: name and description joined by ", ".
inline std::string phenotype_prompt(const Phenotype& p) { return p.name + ", " + p.description; }

inline std::vector<double> pseudo_embedding(const std::string& prompt, std::size_t d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, fnv1a64(prompt)));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& x : v) {
      x = gauss(rng);
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

/// Parsed embedding file: dimension plus name -> vector.
struct EmbeddingTable {
  std::size_t dimension = 0;
  std::map<std::string, std::vector<double>> rows;
};

inline EmbeddingTable read_embedding_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file '" + path + "'");
  EmbeddingTable table;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError("empty embedding file", 1);
  ++lineno;
  if (line.rfind("d=", 0) != 0) throw ParseError("expected header 'd=<int>'", lineno);
  try {
    table.dimension = std::stoul(line.substr(2));
  } catch (const std::exception&) {
    throw ParseError("bad dimension in header", lineno);
  }
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected '<name>\\t<values>'", lineno);
    std::string name = line.substr(0, tab);
    std::vector<double> values;
    std::stringstream ss(line.substr(tab + 1));
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        values.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ParseError("bad float '" + tok + "'", lineno);
      }
    }
    if (values.size() != table.dimension) {
      throw ShapeError("embedding for '" + name + "' has " + std::to_string(values.size()) + " values, expected " +
                       std::to_string(table.dimension));
    }
    table.rows[name] = std::move(values);
  }
  return table;
}

inline void write_embedding_file(const std::string& path, const std::vector<std::string>& names, const Matrix& u) {
  if (names.size() != u.rows()) throw ShapeError("write_embedding_file: names/rows mismatch");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write embedding file '" + path + "'");
  out << "d=" << u.cols() << "\n";
  for (std::size_t i = 0; i < u.rows(); ++i) {
    out << names[i] << '\t';
    for (std::size_t j = 0; j < u.cols(); ++j) out << (j ? "," : "") << fmt::format("{:.17g}", u(i, j));
    out << '\n';
  }
}

/// U (N x d): row i embeds phenotype i; every row has unit L2 norm.
inline Matrix embed_phenotypes(const PhenotypeKB& kb, const EmbeddingSource& src) {
  if (src.dimension < 2) throw ConfigError("embedding dimension must be >= 2");
  Matrix u(kb.size(), src.dimension);
  if (src.mode == EmbeddingSource::Mode::kPseudo) {
    for (std::size_t i = 0; i < kb.size(); ++i) {
      const auto v = pseudo_embedding(phenotype_prompt(kb.phenotypes[i]), src.dimension, src.seed);
      std::copy(v.begin(), v.end(), u.row(i).begin());
    }
    return u;
  }
  const auto table = read_embedding_file(src.path);
  if (table.dimension != src.dimension) {
    throw ShapeError("embedding file dimension " + std::to_string(table.dimension) + " != requested " +
                     std::to_string(src.dimension));
  }
  for (std::size_t i = 0; i < kb.size(); ++i) {
    const auto it = table.rows.find(kb.phenotypes[i].name);
    if (it == table.rows.end()) throw LookupError("embedding file has no row for '" + kb.phenotypes[i].name + "'");
    double norm = 0.0;
    for (double x : it->second) norm += x * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw DataError("zero embedding for '" + kb.phenotypes[i].name + "'");
    // Rows already unit-norm are copied verbatim so a written table reloads bit-exactly.
    const double scale = std::abs(norm - 1.0) > 1e-12 ? 1.0 / norm : 1.0;
    for (std::size_t j = 0; j < src.dimension; ++j) u(i, j) = it->second[j] * scale;
  }
  return u;
}

}  // namespace phenomil
