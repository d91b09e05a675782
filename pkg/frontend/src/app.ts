/**
 * Operator console: submit a query, watch the reasoning trace live, approve
 * or abort gated steps, and inspect the counterfactual candidate gallery with
 * its metric table and difference-map overlay.
 *
 * All state is reduced from the event stream; a refresh reconstructs the
 * identical screen from GET /events?from=0.
 */

import { GatewayClient } from "./api.js";
import { applyEvent, createState, viewModels } from "./reducer.js";
import { EventStream } from "./stream.js";
import type { GalleryViewModel, TraceViewModel } from "./types.js";

const gatewayInput = el<HTMLInputElement>("gateway");
const queryInput = el<HTMLInputElement>("query");
const scenarioInput = el<HTMLInputElement>("scenario");
const seedInput = el<HTMLInputElement>("seed");
const manualCheckbox = el<HTMLInputElement>("manual");
const submitButton = el<HTMLButtonElement>("submit");
const banner = el<HTMLDivElement>("banner");
const traceRoot = el<HTMLDivElement>("trace");
const galleryRoot = el<HTMLDivElement>("gallery");
const overlayCheckbox = el<HTMLInputElement>("overlay");

let client = new GatewayClient(gatewayInput.value);
let sessionId: string | null = null;
let latest: { trace: TraceViewModel; gallery: GalleryViewModel } | null = null;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function setBanner(text: string, kind: "info" | "error" = "info"): void {
  banner.textContent = text;
  banner.className = `banner ${kind}`;
}

submitButton.addEventListener("click", () => {
  void startSession();
});
overlayCheckbox.addEventListener("change", () => render());

async function startSession(): Promise<void> {
  client = new GatewayClient(gatewayInput.value.replace(/\/$/, ""));
  traceRoot.replaceChildren();
  galleryRoot.replaceChildren();
  try {
    sessionId = await client.createSession({
      query: queryInput.value || "Analyze this study.",
      scenario: scenarioInput.value || undefined,
      seed: Number(seedInput.value || "0"),
      approval_mode: manualCheckbox.checked ? "manual" : "auto",
    });
  } catch (err) {
    setBanner(String(err), "error");
    return;
  }
  setBanner(`session ${sessionId} running`);
  const state = createState();
  const stream = new EventStream(client.baseUrl, sessionId, { retryDelayMs: 500 });
  try {
    await stream.run((event) => {
      applyEvent(state, event);
      latest = viewModels(state);
      render();
    });
    setBanner(`session ${sessionId}: ${latest?.trace.outcome ?? "closed"}`);
  } catch (err) {
    setBanner(`stream lost: ${String(err)}`, "error");
  }
}

function render(): void {
  if (!latest) return;
  renderTrace(latest.trace);
  renderGallery(latest.gallery);
}

function renderTrace(trace: TraceViewModel): void {
  traceRoot.replaceChildren();
  for (const step of trace.steps) {
    const row = document.createElement("div");
    row.className = `step ${step.status}`;
    const head = document.createElement("div");
    head.className = "step-head";
    head.textContent = `step ${step.step} · ${step.tool} · ${step.status}`;
    const thought = document.createElement("div");
    thought.className = "thought";
    thought.textContent = step.thought;
    const action = document.createElement("code");
    action.textContent = step.actionText;
    row.append(head, thought, action);
    if (step.resultSummary) {
      const result = document.createElement("div");
      result.className = "result";
      result.textContent = step.resultSummary;
      row.append(result);
    }
    if (step.status === "awaiting_approval" && sessionId) {
      const approve = document.createElement("button");
      approve.textContent = "Approve";
      approve.addEventListener("click", () => void client.control(sessionId!, "approve"));
      const abort = document.createElement("button");
      abort.textContent = "Abort";
      abort.addEventListener("click", () => void client.control(sessionId!, "abort"));
      row.append(approve, abort);
    }
    traceRoot.append(row);
  }
  if (trace.outcome === "final") {
    const done = document.createElement("div");
    done.className = "final";
    done.textContent = `final: ${trace.finalText ?? ""}`;
    traceRoot.append(done);
  } else if (trace.outcome === "timeout") {
    const done = document.createElement("div");
    done.className = "final timeout";
    done.textContent = trace.aborted ? "aborted by operator" : "timed out";
    traceRoot.append(done);
  }
}

function renderGallery(gallery: GalleryViewModel): void {
  galleryRoot.replaceChildren();
  if (gallery.factual) {
    galleryRoot.append(
      figure("factual", client.artifactUrl(gallery.factual),
             overlayCheckbox.checked && gallery.differenceMap
               ? client.artifactUrl(gallery.differenceMap, "heat")
               : null),
    );
  }
  if (gallery.candidates.length === 0) return;

  const table = document.createElement("table");
  table.innerHTML =
    "<tr><th></th><th>#</th><th>editor</th><th>CPG</th><th>CFR</th><th>SSIM</th><th>SIP</th><th>score</th></tr>";
  for (const candidate of gallery.candidates) {
    const row = document.createElement("tr");
    if (candidate.selected) row.className = "selected";
    row.innerHTML =
      `<td>${candidate.selected ? "★" : ""}</td><td>${candidate.index}</td>` +
      `<td>${candidate.editor}</td><td>${candidate.cpg.toFixed(3)}</td>` +
      `<td>${candidate.flipped ? "flip" : "–"}</td><td>${candidate.ssim.toFixed(3)}</td>` +
      `<td>${candidate.sip.toFixed(3)}</td><td>${candidate.score.toFixed(3)}</td>`;
    table.append(row);
  }
  galleryRoot.append(table);

  const strip = document.createElement("div");
  strip.className = "strip";
  for (const candidate of gallery.candidates) {
    strip.append(figure(
      `#${candidate.index}${candidate.selected ? " ★" : ""}`,
      client.artifactUrl(candidate.image), null, candidate.selected));
  }
  if (gallery.differenceMap) {
    strip.append(figure("difference", client.artifactUrl(gallery.differenceMap, "heat")));
  }
  galleryRoot.append(strip);
}

function figure(caption: string, url: string, overlayUrl: string | null = null,
                highlight = false): HTMLElement {
  const wrap = document.createElement("figure");
  if (highlight) wrap.className = "highlight";
  const img = document.createElement("img");
  img.src = url;
  wrap.append(img);
  if (overlayUrl) {
    const overlay = document.createElement("img");
    overlay.src = overlayUrl;
    overlay.className = "overlay";
    wrap.append(overlay);
  }
  const cap = document.createElement("figcaption");
  cap.textContent = caption;
  wrap.append(cap);
  return wrap;
}
