#pragma once

#include "stream/attention_analytics.hpp"
#include "stream/block_grid.hpp"
#include "stream/dense_oracle.hpp"
#include "stream/error.hpp"
#include "stream/flow_graph.hpp"
#include "stream/mask_io.hpp"
#include "stream/matrix.hpp"
#include "stream/parallel.hpp"
#include "stream/sparsity_search.hpp"
#include "stream/stream_estimator.hpp"
#include "stream/tensor_store.hpp"
