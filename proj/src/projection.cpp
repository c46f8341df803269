#include "mpum/projection.hpp"

#include <fstream>

#include <json.hpp>

namespace mpum {

ExternalEmbeddingSet<double> load_external_embeddings(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("embedding file " + path + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("source_id") || !j.contains("dim") || !j.contains("embeddings"))
        throw FormatError("embedding file " + path + ": need source_id, dim, embeddings");

    ExternalEmbeddingSet<double> set;
    try {
        set.source_id = j.at("source_id").get<std::string>();
        set.dim = j.at("dim").get<int64_t>();
        for (const auto& [name, vec] : j.at("embeddings").items()) {
            std::vector<double> row = vec.get<std::vector<double>>();
            if (static_cast<int64_t>(row.size()) != set.dim)
                throw FormatError("embedding file " + path + ": category '" + name + "' has length " +
                                  std::to_string(row.size()) + ", declared dim is " + std::to_string(set.dim));
            set.rows.emplace(name, std::move(row));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("embedding file " + path + ": " + e.what());
    }
    if (set.dim < 1) throw FormatError("embedding file " + path + ": dim must be >= 1");
    return set;
}

}  // namespace mpum
