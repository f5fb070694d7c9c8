#pragma once

#include "featureloop/core.hpp"
#include "featureloop/random.hpp"
#include "featureloop/sealed_log.hpp"
#include "featureloop/memory.hpp"
#include "featureloop/llm.hpp"
#include "featureloop/sentinel.hpp"
#include "featureloop/oracle.hpp"
#include "featureloop/architect.hpp"
#include "featureloop/control.hpp"
#include "featureloop/simharness.hpp"
#include "featureloop/agent.hpp"
#include "featureloop/analysis.hpp"
#include "featureloop/server.hpp"
#include "featureloop/cli.hpp"
