#pragma once

// Everything except the HTTP layer (include perfscreen/service/http_api.hpp
// for that; it pulls in cpp-httplib).

#include "perfscreen/core/csv.hpp"
#include "perfscreen/core/date.hpp"
#include "perfscreen/core/errors.hpp"
#include "perfscreen/core/hash.hpp"
#include "perfscreen/core/lru.hpp"
#include "perfscreen/core/slice.hpp"
#include "perfscreen/detect/boosted_residual.hpp"
#include "perfscreen/detect/copula.hpp"
#include "perfscreen/detect/features.hpp"
#include "perfscreen/detect/hierarchical.hpp"
#include "perfscreen/detect/isolation_forest.hpp"
#include "perfscreen/detect/registry.hpp"
#include "perfscreen/detect/statistical.hpp"
#include "perfscreen/detect/types.hpp"
#include "perfscreen/evaluate.hpp"
#include "perfscreen/ingest.hpp"
#include "perfscreen/service/engine.hpp"
#include "perfscreen/store.hpp"
#include "perfscreen/synth/generator.hpp"
#include "perfscreen/synth/oracle.hpp"
