#include "sgdiff/graph_encoder.hpp"

// Explicit instantiations: float for training, double for gradient checks.

namespace sgdiff {

template void init_graph_encoder<float>(ParamStoreT<float>&, Rng&, int64_t, const std::string&);
template void init_graph_encoder<double>(ParamStoreT<double>&, Rng&, int64_t, const std::string&);

template GraphFeaturesT<float> gcn_forward<float>(const SceneGraph&, ParamStoreT<float>&,
                                                  const Vocab&, const std::string&);
template GraphFeaturesT<double> gcn_forward<double>(const SceneGraph&, ParamStoreT<double>&,
                                                    const Vocab&, const std::string&);

template LayoutPredT<float> layout_decode<float>(const GraphFeaturesT<float>&, ParamStoreT<float>&,
                                                 const std::string&);
template LayoutPredT<double> layout_decode<double>(const GraphFeaturesT<double>&,
                                                   ParamStoreT<double>&, const std::string&);

template VarT<float> compose_layout<float>(const VarT<float>&, const VarT<float>&,
                                           const VarT<float>&, int64_t, int64_t);
template VarT<double> compose_layout<double>(const VarT<double>&, const VarT<double>&,
                                             const VarT<double>&, int64_t, int64_t);

template VarT<float> layout_loss<float>(const LayoutPredT<float>&, const LayoutGT&);
template VarT<double> layout_loss<double>(const LayoutPredT<double>&, const LayoutGT&);

template VarT<float> triple_encode<float>(const std::vector<Triple>&, ParamStoreT<float>&,
                                          const Vocab&, const std::string&);
template VarT<double> triple_encode<double>(const std::vector<Triple>&, ParamStoreT<double>&,
                                            const Vocab&, const std::string&);

template VarT<float> graph_embedding<float>(const SceneGraph&, ParamStoreT<float>&, const Vocab&,
                                            const std::string&);
template VarT<double> graph_embedding<double>(const SceneGraph&, ParamStoreT<double>&,
                                              const Vocab&, const std::string&);

template VarT<float> image_embed<float>(const VarT<float>&, ParamStoreT<float>&,
                                        const std::string&);
template VarT<double> image_embed<double>(const VarT<double>&, ParamStoreT<double>&,
                                          const std::string&);

template VarT<float> contrastive_loss<float>(const VarT<float>&, const VarT<float>&,
                                             const VarT<float>&, ParamStoreT<float>&,
                                             const std::string&);
template VarT<double> contrastive_loss<double>(const VarT<double>&, const VarT<double>&,
                                               const VarT<double>&, ParamStoreT<double>&,
                                               const std::string&);

}  // namespace sgdiff
