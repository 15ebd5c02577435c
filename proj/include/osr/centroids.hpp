#pragma once

#include <vector>

#include <json.hpp>

#include "osr/common.hpp"
#include "osr/matrix.hpp"

namespace osr {

/// Per-class latent centroids. Rows align with class_ids; both the GMVAE
/// and the ii-loss pipelines produce one of these from training embeddings.
struct CentroidSet {
    Matrix centroids;            // [C x dim_z]
    std::vector<int> class_ids;  // dataset-level class ids, no duplicates

    int size() const { return centroids.rows; }
    int dim() const { return centroids.cols; }

    void validate() const {
        require(centroids.rows == static_cast<int>(class_ids.size()),
                "CentroidSet: row count does not match class_ids");
        require(centroids.rows >= 2, "CentroidSet: need at least 2 centroids");
        require(all_finite(centroids.data), "CentroidSet: non-finite centroid");
        for (std::size_t i = 0; i < class_ids.size(); ++i)
            for (std::size_t j = i + 1; j < class_ids.size(); ++j)
                require(class_ids[i] != class_ids[j], "CentroidSet: duplicate class id");
    }

    /// Index of the nearest centroid by Euclidean distance; lowest index
    /// wins ties.
    int nearest(std::span<const double> embedding) const {
        int best = 0;
        double best_d = squared_distance(embedding, centroids.row(0));
        for (int i = 1; i < centroids.rows; ++i) {
            const double d = squared_distance(embedding, centroids.row(i));
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        return best;
    }

    nlohmann::json to_json() const {
        return {{"class_ids", class_ids},
                {"centroids", {{"rows", centroids.rows}, {"cols", centroids.cols}, {"data", centroids.data}}}};
    }

    static CentroidSet from_json(const nlohmann::json& j) {
        CentroidSet c;
        c.class_ids = j.at("class_ids").get<std::vector<int>>();
        const auto& m = j.at("centroids");
        c.centroids = Matrix(m.at("rows").get<int>(), m.at("cols").get<int>());
        c.centroids.data = m.at("data").get<Vec>();
        c.validate();
        return c;
    }
};

}  // namespace osr
