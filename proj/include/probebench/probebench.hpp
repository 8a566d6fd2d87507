#pragma once

#include "probebench/catalog.hpp"
#include "probebench/errors.hpp"
#include "probebench/feature_store.hpp"
#include "probebench/gradcheck.hpp"
#include "probebench/heads.hpp"
#include "probebench/nn.hpp"
#include "probebench/orchestrator.hpp"
#include "probebench/pipeline.hpp"
#include "probebench/report.hpp"
#include "probebench/rng.hpp"
#include "probebench/synthetic.hpp"
#include "probebench/trainer.hpp"
#include "probebench/worker_pool.hpp"
