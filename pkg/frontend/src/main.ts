/** DOM assembly for the annotation editor.
 *
 * The markup is plain SVG and form controls so the whole editor runs (and
 * is testable) in any DOM implementation. All mutable pose state lives in
 * the Editor; this module only syncs it to the document and translates
 * events back into state calls.
 */
import type { ApiClient } from "./api.js";
import { JOINTS, PELVIS } from "./chain.js";
import { DEFAULT_DEPTH_RANGE, depthFromSlider, sliderFromDepth } from "./depth.js";
import { hitTest } from "./hit.js";
import { orthographicSegments, overlaySegments } from "./preview.js";
import type { DraftStore } from "./state.js";
import { Editor } from "./state.js";

const SVG_NS = "http://www.w3.org/2000/svg";
const HIT_RADIUS = 8;

export interface MountOptions {
  drafts?: DraftStore | null;
  depthRange?: readonly [number, number];
  canvasSize?: number;
}

export interface EditorHandle {
  editor: Editor;
  render(): void;
  /** Await every async handler started so far (saves, validations). */
  flush(): Promise<void>;
  root: HTMLElement;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

export function mountEditor(
  root: HTMLElement,
  api: ApiClient,
  opts: MountOptions = {},
): EditorHandle {
  const editor = new Editor(api, opts.drafts ?? null);
  const [zMin, zMax] = opts.depthRange ?? DEFAULT_DEPTH_RANGE;
  const size = opts.canvasSize ?? 512;

  // --- static document structure -----------------------------------------
  const overlay = document.createElementNS(SVG_NS, "svg");
  overlay.setAttribute("id", "overlay");
  overlay.setAttribute("width", String(size));
  overlay.setAttribute("height", String(size));
  const imageNode = document.createElementNS(SVG_NS, "image");
  imageNode.setAttribute("width", String(size));
  imageNode.setAttribute("height", String(size));
  overlay.appendChild(imageNode);

  const preview = document.createElementNS(SVG_NS, "svg");
  preview.setAttribute("id", "preview");
  preview.setAttribute("width", String(size));
  preview.setAttribute("height", String(size));

  const jointName = el("span", { id: "joint-name" });
  const depthSlider = el("input", {
    id: "depth",
    type: "range",
    min: "0",
    max: "1",
    step: "0.001",
  });
  const yawSlider = el("input", {
    id: "yaw",
    type: "range",
    min: "0",
    max: "6.283",
    step: "0.01",
    value: "0",
  });
  const statusSelect = el("select", { id: "status" });
  for (const s of ["todo", "in_progress", "done"])
    statusSelect.appendChild(el("option", { value: s }, s));
  const validateBtn = el("button", { id: "validate" }, "Validate");
  const saveBtn = el("button", { id: "save" }, "Save");
  const violationsList = el("ul", { id: "violations" });
  const errorsList = el("ul", { id: "errors" });
  const statusLine = el("div", { id: "status-line" });

  const conflictBox = el("div", { id: "conflict" });
  conflictBox.hidden = true;
  const conflictMsg = el("p", { id: "conflict-message" });
  const discardBtn = el("button", { id: "conflict-discard" }, "Refetch, discard my edits");
  const retryBtn = el("button", { id: "conflict-retry" }, "Refetch, then re-apply my edits");
  conflictBox.append(conflictMsg, discardBtn, retryBtn);

  root.append(
    overlay,
    preview,
    jointName,
    depthSlider,
    yawSlider,
    statusSelect,
    validateBtn,
    saveBtn,
    violationsList,
    errorsList,
    conflictBox,
    statusLine,
  );

  // --- async handler chaining so tests can await quiescence --------------
  let pending: Promise<void> = Promise.resolve();
  const queue = (work: () => Promise<void>): void => {
    pending = pending.then(work).catch((err) => {
      statusLine.textContent = `error: ${String(err)}`;
    });
  };

  let yaw = 0;

  // --- state -> DOM -------------------------------------------------------
  const render = (): void => {
    const st = editor.state;
    const rec = st.record;
    for (const node of Array.from(overlay.querySelectorAll(".bone, .joint")))
      node.remove();
    preview.replaceChildren();
    violationsList.replaceChildren();
    errorsList.replaceChildren();
    if (!rec) {
      statusLine.textContent = "no task loaded";
      return;
    }
    imageNode.setAttribute("href", api.imageUrl(rec.image_id));
    const violations = st.validation?.angle_violations ?? [];

    for (const seg of overlaySegments(rec, violations)) {
      const line = document.createElementNS(SVG_NS, "line");
      line.setAttribute("class", seg.violated ? "bone violated" : "bone");
      line.setAttribute("data-bone", seg.bone);
      line.setAttribute("x1", String(seg.from[0]));
      line.setAttribute("y1", String(seg.from[1]));
      line.setAttribute("x2", String(seg.to[0]));
      line.setAttribute("y2", String(seg.to[1]));
      overlay.appendChild(line);
    }
    rec.keypoints_2d.forEach((kp, j) => {
      const c = document.createElementNS(SVG_NS, "circle");
      c.setAttribute(
        "class",
        j === st.selectedJoint ? "joint selected" : "joint",
      );
      c.setAttribute("data-joint", String(j));
      c.setAttribute("cx", String(kp[0] ?? 0));
      c.setAttribute("cy", String(kp[1] ?? 0));
      c.setAttribute("r", "4");
      overlay.appendChild(c);
    });

    for (const seg of orthographicSegments(rec, violations, yaw)) {
      const line = document.createElementNS(SVG_NS, "line");
      line.setAttribute("class", seg.violated ? "bone violated" : "bone");
      line.setAttribute("data-bone", seg.bone);
      line.setAttribute("x1", String(seg.from[0]));
      line.setAttribute("y1", String(seg.from[1]));
      line.setAttribute("x2", String(seg.to[0]));
      line.setAttribute("y2", String(seg.to[1]));
      preview.appendChild(line);
    }

    jointName.textContent = JOINTS[st.selectedJoint] ?? "";
    const isPelvis = st.selectedJoint === PELVIS;
    depthSlider.disabled = isPelvis;
    depthSlider.value = String(
      sliderFromDepth(rec.depth_rel[st.selectedJoint] ?? 0, zMin, zMax),
    );
    statusSelect.value = rec.status;
    saveBtn.disabled = !st.canSubmit();

    for (const v of violations) {
      violationsList.appendChild(
        el(
          "li",
          { "data-bone": v.bone },
          `${v.bone}: ${v.angle.toFixed(1)} deg outside [${v.interval[0]}, ${v.interval[1]}]`,
        ),
      );
    }
    for (const e of st.fieldErrors)
      errorsList.appendChild(el("li", {}, `${e.field}: ${e.message}`));

    conflictBox.hidden = st.conflict === null;
    if (st.conflict)
      conflictMsg.textContent =
        `${st.conflict.message} (server is at version ` +
        `${st.conflict.currentVersion}, yours started from ` +
        `${st.localVersion()}). Refetch to continue.`;
    statusLine.textContent =
      `${rec.image_id} v${rec.version}` + (st.dirty ? " (edited)" : "");
  };

  // --- events -------------------------------------------------------------
  const svgPoint = (ev: MouseEvent): [number, number] => {
    const rect = overlay.getBoundingClientRect();
    return [ev.clientX - rect.left, ev.clientY - rect.top];
  };

  let dragging: number | null = null;
  overlay.addEventListener("mousedown", (ev) => {
    const rec = editor.state.record;
    if (!rec) return;
    const hitIdx = hitTest(svgPoint(ev as MouseEvent), rec.keypoints_2d, HIT_RADIUS);
    if (hitIdx === null) return;
    editor.state.selectJoint(hitIdx);
    dragging = hitIdx;
    render();
  });
  overlay.addEventListener("mousemove", (ev) => {
    if (dragging === null) return;
    const [x, y] = svgPoint(ev as MouseEvent);
    editor.state.moveJoint(dragging, x, y);
    render();
  });
  overlay.addEventListener("mouseup", () => {
    if (dragging === null) return;
    dragging = null;
    editor.saveDraft();
    queue(async () => {
      await editor.validateNow();
      render();
    });
    render();
  });

  depthSlider.addEventListener("input", () => {
    const st = editor.state;
    if (!st.record || st.selectedJoint === PELVIS) return;
    st.setDepth(
      st.selectedJoint,
      depthFromSlider(Number(depthSlider.value), zMin, zMax),
    );
    editor.saveDraft();
    queue(async () => {
      await editor.validateNow();
      render();
    });
    render();
  });

  yawSlider.addEventListener("input", () => {
    yaw = Number(yawSlider.value);
    render();
  });

  statusSelect.addEventListener("change", () => {
    if (!editor.state.record) return;
    editor.state.setStatus(statusSelect.value as "todo" | "in_progress" | "done");
    render();
  });

  root.addEventListener("keydown", (ev) => {
    const key = (ev as KeyboardEvent).key;
    if (key === "]" || key === "ArrowRight") editor.state.cycleJoint(1);
    else if (key === "[" || key === "ArrowLeft") editor.state.cycleJoint(-1);
    else return;
    render();
  });

  validateBtn.addEventListener("click", () => {
    queue(async () => {
      await editor.validateNow();
      render();
    });
  });
  saveBtn.addEventListener("click", () => {
    if (!editor.state.canSubmit()) return;
    queue(async () => {
      await editor.save();
      render();
    });
  });
  discardBtn.addEventListener("click", () => {
    queue(async () => {
      await editor.resolveConflictDiscard();
      render();
    });
  });
  retryBtn.addEventListener("click", () => {
    queue(async () => {
      await editor.resolveConflictRetry();
      render();
    });
  });

  return {
    editor,
    render,
    flush: async () => {
      // drain chains queued by handlers that other flushed work triggered
      let last: Promise<void>;
      do {
        last = pending;
        await last;
      } while (last !== pending);
    },
    root,
  };
}
